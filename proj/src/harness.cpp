// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/harness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

#include <json.hpp>

#include "diloco/checkpoint.hpp"
#include "diloco/rng.hpp"

namespace diloco {

namespace {

using nlohmann::ordered_json;

float eval_loss(const TaskSpec& task, const ParamVector& params,
                size_t eval_size) {
  const Batch batch = make_eval_batch(task, 0, eval_size);
  return static_cast<float>(loss_only(task, params, batch));
}

std::vector<DilocoEngine> build_engines(const RunConfig& config) {
  config.diloco.validate();
  std::vector<DilocoEngine> engines;
  engines.reserve(config.diloco.num_workers_k);
  for (size_t w = 0; w < config.diloco.num_workers_k; ++w) {
    engines.emplace_back(config.diloco, config.task,
                         shard(config.task, w, config.diloco.num_workers_k),
                         config.optim);
  }
  return engines;
}

SimParams build_sim_params(const RunConfig& config) {
  SimParams params;
  params.step_time.base_step_s = config.step_time_base_s;
  params.step_time.multipliers = config.step_time_multipliers;
  params.step_time.jitter_frac = config.step_time_jitter_frac;
  params.step_time.seed = config.seed;
  if (!config.network_file.empty()) {
    params.links = LinkMatrix::load_file(config.network_file);
  } else {
    params.links = LinkMatrix::uniform(config.diloco.num_workers_k,
                                       config.sim_bandwidth_mbits,
                                       config.sim_latency_ms);
  }
  params.comm_payload_bytes_override = config.comm_payload_bytes;
  return params;
}

RunSummary simulate_summary(const RunConfig& config, const SimResult& result,
                            const ParamVector& final_theta) {
  RunSummary summary;
  summary.total_inner_steps = config.diloco.total_inner_steps;
  summary.outer_rounds = result.rounds;
  summary.final_loss = eval_loss(config.task, final_theta, config.eval_size);
  summary.final_perplexity = perplexity(summary.final_loss);
  summary.final_train_loss = result.final_losses.empty()
                                 ? 0.0f
                                 : result.final_losses[0];
  summary.reduce_data_bytes = result.reduce_data_bytes;
  summary.reduce_wire_bytes = result.reduce_data_bytes;  // no framing here
  summary.compute_seconds = result.ledger.compute_seconds();
  summary.comm_seconds = result.ledger.comm_seconds();
  summary.idle_seconds = result.ledger.idle_seconds();
  summary.utilization =
      (summary.compute_seconds + summary.comm_seconds + summary.idle_seconds)
              > 0.0
          ? utilization(result.ledger)
          : 1.0;
  return summary;
}

RunSummary run_simulate(const RunConfig& config,
                        const Checkpoint* resume_from) {
  std::vector<DilocoEngine> engines = build_engines(config);
  SimParams params = build_sim_params(config);
  const uint64_t hash = config_hash(config);

  if (resume_from) {
    if (resume_from->config_hash != hash) {
      throw ConfigError("checkpoint was written by a different config");
    }
    if (resume_from->engines.size() != engines.size()) {
      throw ConfigError("checkpoint worker count mismatch");
    }
    for (size_t w = 0; w < engines.size(); ++w) {
      engines[w].restore_state(resume_from->engines[w]);
    }
    params.first_round = resume_from->completed_rounds;
    params.clock_start_s = resume_from->clock_seconds;
    params.initial_ledger = resume_from->ledger.workers;
    params.initial_reduce_bytes = resume_from->reduce_data_bytes;
  }

  MetricsWriter writer(config.metrics_path);
  const MetricsSink sink = [&writer](const MetricsRecord& record) {
    writer.write(record);
  };

  if (config.checkpoint_every_rounds > 0 && !config.checkpoint_path.empty()) {
    params.on_round_end = [&config, &engines, hash](uint64_t rounds,
                                                    const SimResult& so_far) {
      if (rounds % config.checkpoint_every_rounds != 0) {
        return;
      }
      Checkpoint checkpoint;
      checkpoint.config_hash = hash;
      checkpoint.completed_rounds = rounds;
      checkpoint.clock_seconds = so_far.wall_seconds;
      checkpoint.reduce_data_bytes = so_far.reduce_data_bytes;
      checkpoint.ledger = so_far.ledger;
      for (const DilocoEngine& engine : engines) {
        checkpoint.engines.push_back(engine.state());
      }
      save_checkpoint(checkpoint, config.checkpoint_path);
    };
  }

  const SimResult result = run_simulated(engines, params, sink);
  const RunSummary summary =
      simulate_summary(config, result, engines[0].state().theta_t);
  writer.write_summary(summary);
  return summary;
}

// Shared per-step emission for the two baselines.
void emit_step(MetricsWriter& writer, uint64_t inner_step, float loss,
               float lr, uint64_t bytes, size_t contributors) {
  MetricsRecord record;
  record.kind = RecordKind::step;
  record.inner_step = inner_step;
  record.loss = loss;
  record.perplexity = perplexity(loss);
  record.lr = lr;
  record.bytes_sent = 0;
  writer.write(record);
  if (bytes > 0) {
    MetricsRecord round = record;
    round.kind = RecordKind::round;
    round.bytes_sent = bytes;
    round.contributors = contributors;
    round.outer_epoch = inner_step;
    writer.write(round);
  }
}

RunSummary run_baseline_single(const RunConfig& config) {
  const TaskSpec& task = config.task;
  const ShardDesc sh = shard(task, 0, 1);
  ParamVector params = init_params(task);
  AdamWState adam =
      AdamWState::init(params.layout(), config.optim.beta1, config.optim.beta2,
                       config.optim.adam_eps, config.optim.weight_decay);
  LossScaler scaler;
  scaler.scale = config.optim.scaler_init_scale;
  scaler.growth_interval = config.optim.scaler_growth_interval;
  LrSchedule schedule{config.optim.warmup_steps,
                      config.diloco.total_inner_steps, config.optim.inner_lr,
                      config.optim.lr_decay};

  MetricsWriter writer(config.metrics_path);
  float last_loss = 0.0f;
  for (uint64_t step = 0; step < config.diloco.total_inner_steps; ++step) {
    const Batch batch =
        make_batch(task, sh, step * config.diloco.batch_size,
                   config.diloco.batch_size);
    const InnerStepResult result =
        apply_inner_step(task, batch, params, adam, scaler, schedule);
    last_loss = result.loss;
    emit_step(writer, step + 1, result.loss, result.lr, 0, 0);
  }

  RunSummary summary;
  summary.total_inner_steps = config.diloco.total_inner_steps;
  summary.final_loss = eval_loss(task, params, config.eval_size);
  summary.final_perplexity = perplexity(summary.final_loss);
  summary.final_train_loss = last_loss;
  writer.write_summary(summary);
  return summary;
}

RunSummary run_baseline_dp(const RunConfig& config) {
  const TaskSpec& task = config.task;
  const size_t k = config.diloco.num_workers_k;
  std::vector<ShardDesc> shards;
  for (size_t w = 0; w < k; ++w) {
    shards.push_back(shard(task, w, k));
  }
  ParamVector params = init_params(task);
  AdamWState adam =
      AdamWState::init(params.layout(), config.optim.beta1, config.optim.beta2,
                       config.optim.adam_eps, config.optim.weight_decay);
  LossScaler scaler;
  scaler.scale = config.optim.scaler_init_scale;
  scaler.growth_interval = config.optim.scaler_growth_interval;
  LrSchedule schedule{config.optim.warmup_steps,
                      config.diloco.total_inner_steps, config.optim.inner_lr,
                      config.optim.lr_decay};

  const uint64_t per_step_bytes =
      fleet_reduce_bytes(params.size(), k, Precision::fp32);
  MetricsWriter writer(config.metrics_path);
  RunSummary summary;
  float last_loss = 0.0f;

  for (uint64_t step = 0; step < config.diloco.total_inner_steps; ++step) {
    // Gradients from every shard, averaged each step: the 8x-batch data
    // parallel baseline.
    std::vector<LossGrad> grads;
    grads.reserve(k);
    double mean_loss = 0.0;
    for (size_t w = 0; w < k; ++w) {
      const Batch batch =
          make_batch(task, shards[w], step * config.diloco.batch_size,
                     config.diloco.batch_size);
      grads.push_back(loss_and_grad(task, params, batch));
      mean_loss += grads.back().loss;
    }
    mean_loss /= static_cast<double>(k);
    std::vector<const ParamVector*> contributions;
    for (const LossGrad& lg : grads) {
      contributions.push_back(&lg.grad);
    }
    const ParamVector mean_grad =
        reduce_average(contributions, Precision::fp32);

    // Same scaler protocol as the inner step.
    std::vector<float> scaled(mean_grad.size());
    for (size_t i = 0; i < scaled.size(); ++i) {
      scaled[i] = mean_grad[i] * scaler.scale;
    }
    const UnscaleResult unscaled = scaler_unscale_and_check(
        scaler, ParamVector(mean_grad.layout(), std::move(scaled)));
    float lr = 0.0f;
    if (!unscaled.overflow) {
      lr = lr_at(schedule, adam.step_count + 1);
      params = adamw_step(adam, params, unscaled.grad, lr);
    }
    scaler_update(scaler, unscaled.overflow);

    last_loss = static_cast<float>(mean_loss);
    summary.reduce_data_bytes += per_step_bytes;
    emit_step(writer, step + 1, last_loss, lr, per_step_bytes, k);
  }

  summary.total_inner_steps = config.diloco.total_inner_steps;
  summary.outer_rounds = config.diloco.total_inner_steps;  // every step
  summary.final_loss = eval_loss(task, params, config.eval_size);
  summary.final_perplexity = perplexity(summary.final_loss);
  summary.final_train_loss = last_loss;
  summary.reduce_wire_bytes = summary.reduce_data_bytes;
  writer.write_summary(summary);
  return summary;
}

RunSummary run_worker(const RunConfig& config) {
  Node node(config.node_options());
  std::optional<Address> rendezvous;
  if (!config.rendezvous.empty()) {
    rendezvous = parse_address(config.rendezvous);
  }
  node.join(rendezvous);
  SocketCollective collective(node);

  DilocoEngine engine(
      config.diloco, config.task,
      shard(config.task, config.worker_index, config.diloco.num_workers_k),
      config.optim);
  // Serve current weights to on-ramping joiners.
  node.set_dynamic_provider(
      [&engine, &config](const std::string& key)
          -> std::optional<std::vector<uint8_t>> {
        if (key == "run/" + config.run_id + "/theta_t") {
          return serialize_param_vector(engine.state().theta_t);
        }
        return std::nullopt;
      });

  MetricsWriter writer(config.metrics_path);
  const MetricsSink sink = [&writer](const MetricsRecord& record) {
    writer.write(record);
  };
  const uint64_t hash = config_hash(config);
  std::function<void(uint64_t)> on_round;
  if (config.checkpoint_every_rounds > 0 && !config.checkpoint_path.empty()) {
    on_round = [&engine, &config, hash](uint64_t rounds) {
      if (rounds % config.checkpoint_every_rounds != 0) {
        return;
      }
      Checkpoint checkpoint;
      checkpoint.config_hash = hash;
      checkpoint.completed_rounds = rounds;
      checkpoint.engines.push_back(engine.state());
      save_checkpoint(checkpoint, config.checkpoint_path);
    };
  }

  RunResult result;
  try {
    result = run_training(engine, collective, sink,
                          static_cast<int>(config.worker_index), on_round);
  } catch (...) {
    // Leave a summary of completed epochs behind for diagnosis.
    RunSummary partial;
    partial.total_inner_steps = engine.state().inner_step;
    partial.outer_rounds = engine.state().outer_epoch;
    writer.write_summary(partial);
    node.leave();
    throw;
  }

  const TrafficSnapshot traffic = node.traffic();
  RunSummary summary;
  summary.total_inner_steps = result.steps_done;
  summary.outer_rounds = result.rounds_done;
  summary.final_loss =
      eval_loss(config.task, engine.state().theta_t, config.eval_size);
  summary.final_perplexity = perplexity(summary.final_loss);
  summary.final_train_loss = result.final_train_loss;
  summary.reduce_data_bytes = result.reduce_data_bytes;
  summary.reduce_wire_bytes = result.reduce_wire_bytes;
  summary.control_bytes = traffic.control_sent;
  summary.heartbeat_bytes = traffic.heartbeat_sent;
  summary.compute_seconds = result.compute_ms / 1000.0;
  summary.comm_seconds = result.comm_ms / 1000.0;
  summary.utilization =
      utilization(summary.compute_seconds, summary.comm_seconds, 0.0);
  writer.write_summary(summary);
  node.leave();
  return summary;
}

}  // namespace

RunSummary run_experiment(const RunConfig& config) {
  switch (config.mode) {
    case RunMode::simulate:
      return run_simulate(config, nullptr);
    case RunMode::baseline_single:
      return run_baseline_single(config);
    case RunMode::baseline_dp:
      return run_baseline_dp(config);
    case RunMode::worker:
      return run_worker(config);
  }
  throw ConfigError("unhandled run mode");
}

RunSummary resume_experiment(const RunConfig& config,
                             const std::string& checkpoint_path) {
  if (config.mode != RunMode::simulate) {
    throw ConfigError("resume currently supports simulate mode");
  }
  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  return run_simulate(config, &checkpoint);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

namespace {

void apply_axis(RunConfig& config, const std::string& axis,
                const std::string& value) {
  if (axis == "workers") {
    apply_override(config, "num_workers", value);
  } else if (axis == "local_steps") {
    apply_override(config, "local_steps", value);
  } else if (axis == "precision") {
    apply_override(config, "reduce_precision", value);
  } else {
    throw ConfigError("unknown ablation axis '" + axis +
                      "' (expected workers|local_steps|precision)");
  }
}

std::string run_name(const std::string& axis, const std::string& value,
                     uint64_t seed) {
  return "run_" + axis + "_" + value + "_s" + std::to_string(seed);
}

void write_table_files(const AblationTable& table,
                       const std::string& output_dir) {
  ordered_json j;
  j["axis"] = table.axis;
  j["noise_band"] = table.noise_band();
  ordered_json rows = ordered_json::array();
  for (const AblationRow& row : table.rows) {
    rows.push_back({{"value", row.axis_value},
                    {"seed", row.seed},
                    {"final_loss", row.final_loss},
                    {"final_perplexity", row.final_perplexity},
                    {"reduce_data_bytes", row.reduce_data_bytes},
                    {"outer_rounds", row.outer_rounds},
                    {"metrics", row.metrics_path}});
  }
  j["rows"] = rows;
  ordered_json means = ordered_json::object();
  for (const std::string& value : table.axis_values()) {
    means[value] = table.mean_final_loss(value);
  }
  j["mean_final_loss"] = means;
  std::ofstream(output_dir + "/table.json") << j.dump(2) << "\n";

  std::ofstream csv(output_dir + "/table.csv");
  csv << "axis,value,seed,final_loss,final_perplexity,reduce_data_bytes,"
         "outer_rounds\n";
  for (const AblationRow& row : table.rows) {
    csv << table.axis << ',' << row.axis_value << ',' << row.seed << ','
        << ordered_json(row.final_loss).dump() << ','
        << ordered_json(row.final_perplexity).dump() << ','
        << row.reduce_data_bytes << ',' << row.outer_rounds << '\n';
  }
}

void write_curves(const AblationTable& table, const std::string& axis,
                  const RunConfig& base, const std::string& output_dir) {
  std::ofstream csv(output_dir + "/curves.csv");
  csv << "axis_value,seed,worker,local_step,global_step,outer_epoch,loss\n";
  for (const AblationRow& row : table.rows) {
    const MetricsFile file = read_metrics_file(row.metrics_path);
    uint64_t workers = base.diloco.num_workers_k;
    if (axis == "workers") {
      workers = std::stoull(row.axis_value);
    }
    for (const MetricsRecord& record : file.records) {
      if (record.kind != RecordKind::step) {
        continue;
      }
      csv << row.axis_value << ',' << row.seed << ',' << record.worker << ','
          << record.inner_step << ',' << record.inner_step * workers << ','
          << record.outer_epoch << ','
          << ordered_json(record.loss).dump() << '\n';
    }
  }
}

}  // namespace

double AblationTable::mean_final_loss(const std::string& axis_value) const {
  double total = 0.0;
  size_t count = 0;
  for (const AblationRow& row : rows) {
    if (row.axis_value == axis_value) {
      total += row.final_loss;
      count += 1;
    }
  }
  if (count == 0) {
    throw ConfigError("no rows for axis value '" + axis_value + "'");
  }
  return total / static_cast<double>(count);
}

double AblationTable::noise_band() const {
  double band = 0.0;
  for (const std::string& value : axis_values()) {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (const AblationRow& row : rows) {
      if (row.axis_value == value) {
        lo = std::min(lo, row.final_loss);
        hi = std::max(hi, row.final_loss);
      }
    }
    band = std::max(band, static_cast<double>(hi - lo) / 2.0);
  }
  return band;
}

std::vector<std::string> AblationTable::axis_values() const {
  std::vector<std::string> values;
  for (const AblationRow& row : rows) {
    if (std::find(values.begin(), values.end(), row.axis_value) ==
        values.end()) {
      values.push_back(row.axis_value);
    }
  }
  return values;
}

AblationTable ablation_suite(const RunConfig& base, const std::string& axis,
                             const std::vector<std::string>& values,
                             const std::vector<uint64_t>& seeds,
                             const std::string& output_dir) {
  if (values.empty()) {
    throw ConfigError("ablation values must be nonempty");
  }
  if (seeds.empty()) {
    throw ConfigError("ablation needs at least one seed");
  }
  std::filesystem::create_directories(output_dir);

  AblationTable table;
  table.axis = axis;
  ordered_json manifest;
  manifest["axis"] = axis;
  ordered_json entries = ordered_json::array();

  for (const std::string& value : values) {
    for (uint64_t seed : seeds) {
      RunConfig config = base;
      config.mode = RunMode::simulate;
      apply_axis(config, axis, value);
      apply_override(config, "seed", std::to_string(seed));
      config.metrics_path =
          output_dir + "/" + run_name(axis, value, seed) + ".jsonl";
      config.checkpoint_path.clear();
      const RunSummary summary = run_experiment(config);

      AblationRow row;
      row.axis_value = value;
      row.seed = seed;
      row.final_loss = summary.final_loss;
      row.final_perplexity = summary.final_perplexity;
      row.reduce_data_bytes = summary.reduce_data_bytes;
      row.outer_rounds = summary.outer_rounds;
      row.metrics_path = config.metrics_path;
      table.rows.push_back(row);
      entries.push_back({{"value", value},
                         {"seed", seed},
                         {"metrics", config.metrics_path}});
    }
  }
  manifest["runs"] = entries;
  std::ofstream(output_dir + "/manifest.json") << manifest.dump(2) << "\n";

  write_table_files(table, output_dir);
  write_curves(table, axis, base, output_dir);
  return table;
}

AblationTable analyze_ablation(const std::string& output_dir) {
  std::ifstream in(output_dir + "/manifest.json");
  if (!in) {
    throw ConfigError("no manifest.json under '" + output_dir + "'");
  }
  const ordered_json manifest = ordered_json::parse(in);
  AblationTable table;
  table.axis = manifest.at("axis").get<std::string>();
  for (const auto& entry : manifest.at("runs")) {
    const std::string path = entry.at("metrics").get<std::string>();
    const MetricsFile file = read_metrics_file(path);
    if (!file.summary) {
      throw ConfigError("metrics file '" + path + "' has no summary");
    }
    AblationRow row;
    row.axis_value = entry.at("value").get<std::string>();
    row.seed = entry.at("seed").get<uint64_t>();
    row.final_loss = file.summary->final_loss;
    row.final_perplexity = file.summary->final_perplexity;
    row.reduce_data_bytes = file.summary->reduce_data_bytes;
    row.outer_rounds = file.summary->outer_rounds;
    row.metrics_path = path;
    table.rows.push_back(row);
  }
  write_table_files(table, output_dir);
  return table;
}

// ---------------------------------------------------------------------------
// bench-allreduce
// ---------------------------------------------------------------------------

BenchReport bench_allreduce(size_t workers, uint64_t payload_bytes_target,
                            Precision precision, const std::string& transport,
                            double bandwidth_mbits, double latency_ms) {
  if (workers == 0) {
    throw ConfigError("bench_allreduce: need at least one worker");
  }
  const uint64_t width = element_width(precision);
  const size_t elements =
      static_cast<size_t>(std::max<uint64_t>(1, payload_bytes_target / width));

  BenchReport report;
  report.workers = workers;
  report.payload_bytes_requested = payload_bytes_target;
  report.precision = precision;
  report.transport = transport;
  report.analytic_per_peer_bytes =
      per_peer_reduce_bytes(elements, workers, 0, precision);

  auto layout = Layout::single("bench", elements);
  std::vector<ParamVector> locals;
  for (size_t w = 0; w < workers; ++w) {
    CounterRng rng(4242, "bench", w);
    std::vector<float> data(elements);
    for (float& f : data) {
      f = rng.next_uniform(-1.0f, 1.0f);
    }
    locals.emplace_back(layout, std::move(data));
  }

  if (transport == "sim") {
    const LinkMatrix links =
        LinkMatrix::uniform(workers, bandwidth_mbits, latency_ms);
    std::vector<const ParamVector*> contributions;
    for (const ParamVector& v : locals) {
      contributions.push_back(&v);
    }
    (void)reduce_average(contributions, precision);
    report.analytic_time_s = ring_reduce_time_s(
        links, workers, payload_bytes(elements, precision));
    report.wall_ms = report.analytic_time_s * 1000.0;
    for (size_t w = 0; w < workers; ++w) {
      report.per_peer_data_bytes.push_back(
          per_peer_reduce_bytes(elements, workers, w, precision));
    }
    report.agreement = true;
    return report;
  }
  if (transport != "tcp") {
    throw ConfigError("unknown transport '" + transport +
                      "' (expected tcp|sim)");
  }
  if (workers < 2) {
    throw ConfigError("tcp transport needs at least 2 workers");
  }

  NodeOptions options;
  options.run_id = "bench";
  std::vector<std::unique_ptr<Node>> nodes;
  for (size_t w = 0; w < workers; ++w) {
    nodes.push_back(std::make_unique<Node>(options));
    nodes[w]->join(w == 0 ? std::optional<Address>{}
                          : std::optional<Address>{nodes[0]->address()});
  }
  // Wait for a converged view before timing.
  for (int spin = 0; spin < 500; ++spin) {
    bool ready = true;
    for (const auto& node : nodes) {
      ready = ready && node->membership().peers.size() == workers;
    }
    if (ready) {
      break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  std::vector<PseudoGradient> results(workers);
  std::vector<ReduceReport> reduce_reports(workers);
  std::vector<std::string> errors(workers);
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::thread> threads;
  for (size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      PseudoGradient pg;
      pg.delta = locals[w];
      pg.precision = precision;
      pg.outer_epoch = 0;
      try {
        results[w] = nodes[w]->all_reduce_avg(pg, &reduce_reports[w], {});
      } catch (const std::exception& e) {
        errors[w] = e.what();
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }
  report.wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - start)
                       .count();
  for (size_t w = 0; w < workers; ++w) {
    if (!errors[w].empty()) {
      throw CollectiveError("bench worker " + std::to_string(w) +
                            " failed: " + errors[w]);
    }
    report.per_peer_data_bytes.push_back(reduce_reports[w].data_bytes_sent);
  }
  report.agreement = true;
  for (size_t w = 1; w < workers; ++w) {
    report.agreement =
        report.agreement && results[w].delta == results[0].delta;
  }
  for (auto& node : nodes) {
    node->leave();
  }
  return report;
}

}  // namespace diloco
