// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "diloco/checkpoint.hpp"
#include "diloco/harness.hpp"

using namespace diloco;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
  static int counter = 0;
  const std::string dir =
      (fs::temp_directory_path() / ("diloco_harness_" +
                                    std::to_string(::getpid()) + "_" +
                                    std::to_string(counter++)))
          .string();
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

RunConfig tiny_config(const std::string& dir) {
  RunConfig config = parse_config_text(R"(
mode = simulate
task_kind = char_lm
input_dim = 1
hidden_dim = 4
output_dim = 8
dataset_size = 1048576
seed = 5
batch_size = 4
local_steps = 5
num_workers = 2
total_inner_steps = 20
inner_lr = 0.01
warmup_steps = 5
weight_decay = 0.0
eval_size = 256
)");
  config.metrics_path = dir + "/metrics.jsonl";
  return config;
}

}  // namespace

TEST_CASE("config parsing and overrides") {
  RunConfig config = parse_config_text("inner_lr = 0.001\nnum_workers = 4\n");
  CHECK(config.optim.inner_lr == 0.001f);
  CHECK(config.diloco.num_workers_k == 4);

  CHECK_THROWS_WITH_AS(parse_config_text("no_such_key = 1\n"),
                       doctest::Contains("no_such_key"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("inner_lr = fast\n"),
                       doctest::Contains("inner_lr"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("just a line\n"), ConfigError);

  // Comments and blank lines are fine.
  CHECK_NOTHROW(parse_config_text("# comment\n\nseed = 3 # trailing\n"));

  apply_override(config, "reduce_precision", "fp16");
  CHECK(config.diloco.reduce_precision == Precision::fp16);
  CHECK_THROWS_AS(apply_override(config, "bogus", "1"), ConfigError);
}

TEST_CASE("config hash covers every field and is stable") {
  RunConfig a = parse_config_text("seed = 1\n");
  RunConfig b = parse_config_text("seed = 1\n");
  CHECK(config_hash(a) == config_hash(b));
  apply_override(b, "outer_lr", "0.9");
  CHECK(config_hash(a) != config_hash(b));
  // seed feeds the task too.
  RunConfig c = parse_config_text("seed = 2\n");
  CHECK(c.task.seed == 2);
}

TEST_CASE("simulate mode writes step, round and summary records") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  const RunSummary summary = run_experiment(config);
  CHECK(summary.outer_rounds == 4);
  CHECK(summary.total_inner_steps == 20);

  const MetricsFile file = read_metrics_file(config.metrics_path);
  REQUIRE(file.summary.has_value());
  CHECK(file.summary->outer_rounds == 4);
  size_t steps = 0, rounds = 0;
  for (const MetricsRecord& record : file.records) {
    // perplexity == exp(loss) to FP32 rounding.
    if (record.kind == RecordKind::step || record.kind == RecordKind::round) {
      CHECK(record.perplexity == perplexity(record.loss));
    }
    if (record.kind == RecordKind::step) {
      steps += 1;
      CHECK(record.bytes_sent == 0);  // bytes only on round records
    }
    if (record.kind == RecordKind::round) {
      rounds += 1;
      CHECK(record.bytes_sent > 0);
      CHECK(record.contributors == 2);
    }
  }
  CHECK(steps == 20 * 2);   // per worker
  CHECK(rounds == 4 * 2);
}

TEST_CASE("communication ledger: bytes equal rounds times analytic payload") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  config.diloco.num_workers_k = 4;
  config.diloco.local_steps_h = 5;
  config.diloco.total_inner_steps = 20;
  const RunSummary summary = run_experiment(config);

  const size_t n = init_params(config.task).size();
  const uint64_t per_round = fleet_reduce_bytes(n, 4, Precision::fp32);
  CHECK(summary.outer_rounds == 4);
  CHECK(summary.reduce_data_bytes == 4 * per_round);
}

TEST_CASE("simulate mode is byte-identical across runs") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  config.step_time_base_s = 0.25;
  config.step_time_jitter_frac = 0.1;
  run_experiment(config);
  const std::string first = read_file(config.metrics_path);
  run_experiment(config);
  const std::string second = read_file(config.metrics_path);
  CHECK(first == second);
  CHECK_FALSE(first.empty());
}

TEST_CASE("identity: baseline_single equals DiLoCo K=1 H=1 outer identity") {
  const std::string dir = temp_dir();
  RunConfig diloco_config = tiny_config(dir);
  diloco_config.diloco.num_workers_k = 1;
  diloco_config.diloco.local_steps_h = 1;
  diloco_config.optim.outer_lr = 1.0f;
  diloco_config.optim.outer_momentum = 0.0f;
  diloco_config.metrics_path = dir + "/diloco.jsonl";
  run_experiment(diloco_config);

  RunConfig baseline = diloco_config;
  baseline.mode = RunMode::baseline_single;
  baseline.metrics_path = dir + "/baseline.jsonl";
  run_experiment(baseline);

  const MetricsFile a = read_metrics_file(diloco_config.metrics_path);
  const MetricsFile b = read_metrics_file(baseline.metrics_path);
  std::vector<float> losses_a, losses_b;
  for (const MetricsRecord& r : a.records) {
    if (r.kind == RecordKind::step) {
      losses_a.push_back(r.loss);
    }
  }
  for (const MetricsRecord& r : b.records) {
    if (r.kind == RecordKind::step) {
      losses_b.push_back(r.loss);
    }
  }
  REQUIRE(losses_a.size() == losses_b.size());
  for (size_t i = 0; i < losses_a.size(); ++i) {
    REQUIRE(losses_a[i] == losses_b[i]);  // bitwise
  }
  CHECK(a.summary->final_loss == b.summary->final_loss);
}

TEST_CASE("baseline_dp accounts per-step all-reduce bytes") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  config.mode = RunMode::baseline_dp;
  config.diloco.num_workers_k = 2;
  config.diloco.total_inner_steps = 10;
  config.diloco.local_steps_h = 1;
  const RunSummary summary = run_experiment(config);
  const size_t n = init_params(config.task).size();
  CHECK(summary.reduce_data_bytes ==
        10 * fleet_reduce_bytes(n, 2, Precision::fp32));
  CHECK(summary.outer_rounds == 10);
}

TEST_CASE("checkpoint resume reproduces the remaining records bitwise") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  config.step_time_base_s = 0.5;
  config.diloco.total_inner_steps = 30;  // 6 rounds of 5
  config.checkpoint_path = dir + "/mid.ckpt";
  config.checkpoint_every_rounds = 4;  // fires exactly once, at round 4 of 6
  run_experiment(config);
  const std::string full = read_file(config.metrics_path);

  RunConfig resumed = config;
  resumed.metrics_path = dir + "/resumed.jsonl";
  const RunSummary resumed_summary =
      resume_experiment(resumed, config.checkpoint_path);
  const std::string tail = read_file(resumed.metrics_path);

  // The resumed file must equal the suffix of the uninterrupted file.
  REQUIRE(!tail.empty());
  REQUIRE(tail.size() < full.size());
  CHECK(full.substr(full.size() - tail.size()) == tail);

  const MetricsFile full_file = read_metrics_file(config.metrics_path);
  CHECK(resumed_summary.final_loss == full_file.summary->final_loss);
  CHECK(resumed_summary.reduce_data_bytes ==
        full_file.summary->reduce_data_bytes);
}

TEST_CASE("checkpoint round trip preserves engine state") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  auto engines = std::vector<DilocoEngine>();
  for (size_t w = 0; w < 2; ++w) {
    engines.emplace_back(config.diloco, config.task,
                         shard(config.task, w, 2), config.optim);
  }
  for (auto& engine : engines) {
    for (int i = 0; i < 5; ++i) {
      engine.inner_step(engine.next_batch());
    }
  }
  Checkpoint checkpoint;
  checkpoint.config_hash = config_hash(config);
  checkpoint.completed_rounds = 1;
  checkpoint.clock_seconds = 12.5;
  checkpoint.reduce_data_bytes = 999;
  checkpoint.ledger.workers.resize(2);
  checkpoint.ledger.workers[0].compute_seconds = 3.0;
  for (const auto& engine : engines) {
    checkpoint.engines.push_back(engine.state());
  }
  const std::string path = dir + "/state.ckpt";
  save_checkpoint(checkpoint, path);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.config_hash == checkpoint.config_hash);
  CHECK(loaded.completed_rounds == 1);
  CHECK(loaded.clock_seconds == 12.5);
  CHECK(loaded.reduce_data_bytes == 999);
  CHECK(loaded.ledger.workers[0].compute_seconds == 3.0);
  REQUIRE(loaded.engines.size() == 2);
  CHECK(loaded.engines[0].theta_local == engines[0].state().theta_local);
  CHECK(loaded.engines[0].inner.m == engines[0].state().inner.m);
  CHECK(loaded.engines[0].inner.step_count ==
        engines[0].state().inner.step_count);
  CHECK(loaded.engines[1].scaler.scale == engines[1].state().scaler.scale);
}

TEST_CASE("ablation suite: precision axis with two seeds") {
  const std::string dir = temp_dir();
  RunConfig base = tiny_config(dir);
  const AblationTable table =
      ablation_suite(base, "precision", {"fp32", "fp16"}, {1, 2}, dir);
  REQUIRE(table.rows.size() == 4);
  CHECK(table.axis_values() == std::vector<std::string>{"fp32", "fp16"});
  CHECK(table.noise_band() >= 0.0);
  CHECK(fs::exists(dir + "/table.json"));
  CHECK(fs::exists(dir + "/table.csv"));
  CHECK(fs::exists(dir + "/curves.csv"));
  CHECK(fs::exists(dir + "/manifest.json"));

  // Recomputable from metrics files alone.
  const AblationTable again = analyze_ablation(dir);
  REQUIRE(again.rows.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(again.rows[i].final_loss == table.rows[i].final_loss);
  }
}

TEST_CASE("bench-allreduce on the simulated transport") {
  const BenchReport report =
      bench_allreduce(4, 4800, Precision::fp32, "sim", 100.0, 0.0);
  CHECK(report.agreement);
  CHECK(report.analytic_time_s > 0.0);
  CHECK(report.wall_ms == doctest::Approx(report.analytic_time_s * 1000.0));
  REQUIRE(report.per_peer_data_bytes.size() == 4);
  const double bound = 2.0 * 3.0 / 4.0 * 4800.0;
  for (uint64_t bytes : report.per_peer_data_bytes) {
    CHECK(std::fabs(static_cast<double>(bytes) - bound) <= 0.05 * bound);
  }
}

TEST_CASE("bench-allreduce on tcp reports agreement and ring bytes") {
  const BenchReport report = bench_allreduce(2, 9600, Precision::fp16, "tcp");
  CHECK(report.agreement);
  REQUIRE(report.per_peer_data_bytes.size() == 2);
  const double bound = 9600.0;  // 2*(K-1)/K = 1 at K=2
  for (uint64_t bytes : report.per_peer_data_bytes) {
    CHECK(std::fabs(static_cast<double>(bytes) - bound) <= 0.05 * bound);
  }
  CHECK_THROWS_AS(bench_allreduce(1, 100, Precision::fp32, "tcp"),
                  ConfigError);
}

TEST_CASE("csv export") {
  const std::string dir = temp_dir();
  RunConfig config = tiny_config(dir);
  config.diloco.num_workers_k = 1;
  run_experiment(config);
  const std::string csv_path = dir + "/out.csv";
  export_csv(config.metrics_path, csv_path);
  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(header ==
        "kind,worker,inner_step,outer_epoch,loss,perplexity,lr,"
        "compute_ms,comm_ms,bytes_sent,contributors");
  size_t lines = 0;
  std::string line;
  while (std::getline(csv, line)) {
    if (!line.empty()) {
      lines += 1;
    }
  }
  CHECK(lines == 20 + 4);  // steps + rounds
}
