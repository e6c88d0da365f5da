// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/netsim.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "diloco/rng.hpp"

namespace diloco {

LinkMatrix::LinkMatrix(std::vector<std::string> names,
                       std::vector<double> bw_mbits,
                       std::vector<double> latency_ms)
    : names_(std::move(names)),
      bandwidth_(std::move(bw_mbits)),
      latency_(std::move(latency_ms)) {
  const size_t k = names_.size();
  if (bandwidth_.size() != k * k || latency_.size() != k * k) {
    throw ConfigError("link matrix must be k x k");
  }
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = 0; j < k; ++j) {
      if (i == j) {
        continue;
      }
      if (!std::isfinite(bandwidth_[i * k + j]) ||
          !std::isfinite(latency_[i * k + j]) || latency_[i * k + j] < 0) {
        throw ConfigError("link matrix entries must be finite");
      }
    }
  }
}

LinkMatrix LinkMatrix::uniform(size_t k, double bandwidth_mbits,
                               double latency_ms) {
  std::vector<std::string> names;
  for (size_t i = 0; i < k; ++i) {
    names.push_back("w" + std::to_string(i));
  }
  return LinkMatrix(std::move(names),
                    std::vector<double>(k * k, bandwidth_mbits),
                    std::vector<double>(k * k, latency_ms));
}

LinkMatrix LinkMatrix::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;
  double latency = 0.0;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) {
      continue;
    }
    if (head == "workers:") {
      std::string name;
      while (ls >> name) {
        names.push_back(name);
      }
      continue;
    }
    if (head == "latency_ms:") {
      ls >> latency;
      continue;
    }
    if (!head.empty() && head.back() == ':') {
      head.pop_back();
      std::vector<double> row;
      std::string cell;
      while (ls >> cell) {
        row.push_back(cell == "-" ? 0.0 : std::stod(cell));
      }
      rows.push_back(std::move(row));
      continue;
    }
    throw ConfigError("link matrix: unrecognized line '" + line + "'");
  }
  if (names.empty()) {
    throw ConfigError("link matrix: missing 'workers:' line");
  }
  const size_t k = names.size();
  if (rows.size() != k) {
    throw ConfigError("link matrix: expected " + std::to_string(k) +
                      " bandwidth rows, found " + std::to_string(rows.size()));
  }
  std::vector<double> bw(k * k, 0.0);
  for (size_t i = 0; i < k; ++i) {
    if (rows[i].size() != k) {
      throw ConfigError("link matrix: row " + std::to_string(i) +
                        " must have " + std::to_string(k) + " entries");
    }
    for (size_t j = 0; j < k; ++j) {
      bw[i * k + j] = rows[i][j];
    }
  }
  return LinkMatrix(std::move(names), std::move(bw),
                    std::vector<double>(k * k, latency));
}

LinkMatrix LinkMatrix::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open link matrix file '" + path + "'");
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

double LinkMatrix::bandwidth_mbits(size_t i, size_t j) const {
  return bandwidth_[i * size() + j];
}

double LinkMatrix::latency_ms(size_t i, size_t j) const {
  return latency_[i * size() + j];
}

double transfer_time_s(uint64_t bytes, double bandwidth_mbits,
                       double latency_ms) {
  if (bandwidth_mbits <= 0.0) {
    throw ConfigError("transfer over a zero-bandwidth link");
  }
  return latency_ms / 1000.0 +
         static_cast<double>(bytes) * 8.0 / (bandwidth_mbits * 1e6);
}

double ring_reduce_time_s(const LinkMatrix& links, size_t k,
                          uint64_t payload_bytes) {
  if (k <= 1) {
    return 0.0;
  }
  if (links.size() < k) {
    throw ConfigError("link matrix smaller than the worker count");
  }
  const std::vector<Range> parts = partition_ranges(payload_bytes, k);
  double total = 0.0;
  // 2(K-1) synchronized steps; at step s edge (i -> i+1) carries the
  // partition that is s hops behind its owner.
  for (size_t phase = 0; phase < 2; ++phase) {
    for (size_t s = 0; s + 1 < k; ++s) {
      double step = 0.0;
      for (size_t i = 0; i < k; ++i) {
        const size_t j = (i + 1) % k;
        const size_t part = (i + k - s + phase) % k;
        step = std::max(step,
                        transfer_time_s(parts[part].length,
                                        links.bandwidth_mbits(i, j),
                                        links.latency_ms(i, j)));
      }
      total += step;
    }
  }
  return total;
}

void VirtualClock::schedule_at(double time_s, std::function<void()> action) {
  if (time_s < now_) {
    throw Error("virtual time cannot go backwards");
  }
  queue_.push(Event{time_s, next_seq_++, std::move(action)});
}

void VirtualClock::schedule_in(double delay_s, std::function<void()> action) {
  schedule_at(now_ + delay_s, std::move(action));
}

void VirtualClock::run() {
  while (!queue_.empty()) {
    Event event = queue_.top();
    queue_.pop();
    now_ = event.time_s;
    event.action();
  }
}

double UtilizationLedger::compute_seconds() const {
  double total = 0.0;
  for (const WorkerLedger& w : workers) {
    total += w.compute_seconds;
  }
  return total;
}

double UtilizationLedger::comm_seconds() const {
  double total = 0.0;
  for (const WorkerLedger& w : workers) {
    total += w.comm_seconds;
  }
  return total;
}

double UtilizationLedger::idle_seconds() const {
  double total = 0.0;
  for (const WorkerLedger& w : workers) {
    total += w.idle_seconds;
  }
  return total;
}

double UtilizationLedger::wall_seconds() const {
  if (workers.empty()) {
    return 0.0;
  }
  return (compute_seconds() + comm_seconds() + idle_seconds()) /
         static_cast<double>(workers.size());
}

double utilization(double compute_s, double comm_s, double idle_s) {
  const double total = compute_s + comm_s + idle_s;
  if (total <= 0.0) {
    throw ConfigError("utilization of an empty ledger");
  }
  return compute_s / total;
}

double utilization(const UtilizationLedger& ledger) {
  return utilization(ledger.compute_seconds(), ledger.comm_seconds(),
                     ledger.idle_seconds());
}

double StepTimeModel::step_seconds(size_t worker, uint64_t step) const {
  const double multiplier =
      worker < multipliers.size() ? multipliers[worker] : 1.0;
  double jitter = 1.0;
  if (jitter_frac != 0.0) {
    CounterRng rng(seed, "steptime", (static_cast<uint64_t>(worker) << 40) ^
                                         step);
    jitter = 1.0 + jitter_frac * (2.0 * rng.next_uniform() - 1.0);
  }
  return base_step_s * multiplier * jitter;
}

SimResult run_simulated(std::vector<DilocoEngine>& engines,
                        const SimParams& params, const MetricsSink& sink) {
  if (engines.empty()) {
    throw ConfigError("run_simulated: no engines");
  }
  const size_t k = engines.size();
  const DilocoConfig& config = engines[0].config();
  if (params.links.size() < k) {
    throw ConfigError("link matrix smaller than the worker count");
  }
  // Every needed ring edge must exist.
  for (size_t i = 0; k > 1 && i < k; ++i) {
    if (params.links.bandwidth_mbits(i, (i + 1) % k) <= 0.0) {
      throw ConfigError("disconnected link between workers " +
                        std::to_string(i) + " and " +
                        std::to_string((i + 1) % k));
    }
  }

  SimResult result;
  result.ledger.workers.resize(k);
  if (!params.initial_ledger.empty()) {
    if (params.initial_ledger.size() != k) {
      throw ConfigError("carried ledger does not match the worker count");
    }
    result.ledger.workers = params.initial_ledger;
  }
  result.reduce_data_bytes = params.initial_reduce_bytes;
  result.rounds = params.first_round;
  result.final_losses.resize(k, 0.0f);

  const uint64_t model_elems = engines[0].state().theta_t.size();
  const uint64_t rounds_total =
      config.total_inner_steps / config.local_steps_h;

  VirtualClock clock;
  if (params.clock_start_s > 0.0) {
    clock.schedule_at(params.clock_start_s, [] {});
    clock.run();
  }
  std::vector<double> arrival(k, 0.0);
  double round_start = clock.now();

  for (uint64_t round = params.first_round; round < rounds_total; ++round) {
    // Inner windows: schedule each worker's steps on the virtual clock.
    for (size_t w = 0; w < k; ++w) {
      double t = round_start;
      for (uint64_t h = 0; h < config.local_steps_h; ++h) {
        const uint64_t global_step = engines[w].state().inner_step;
        const double dt = params.step_time.step_seconds(w, global_step + h);
        t += dt;
        clock.schedule_at(t, [&, w, dt] {
          const Batch batch = engines[w].next_batch();
          const InnerStepResult step = engines[w].inner_step(batch);
          result.final_losses[w] = step.loss;
          result.ledger.workers[w].compute_seconds += dt;
          if (sink) {
            MetricsRecord record;
            record.kind = RecordKind::step;
            record.worker = static_cast<int>(w);
            record.inner_step = engines[w].state().inner_step;
            record.outer_epoch = engines[w].state().outer_epoch;
            record.loss = step.loss;
            record.perplexity = perplexity(step.loss);
            record.lr = step.lr;
            record.compute_ms = dt * 1000.0;
            sink(record);
          }
        });
      }
      arrival[w] = t;
    }
    clock.run();

    // Barrier: the fastest workers idle until the last arrival.
    double barrier_time = 0.0;
    for (size_t w = 0; w < k; ++w) {
      barrier_time = std::max(barrier_time, arrival[w]);
    }
    for (size_t w = 0; w < k; ++w) {
      result.ledger.workers[w].idle_seconds += barrier_time - arrival[w];
    }

    // Reduce: shared-kernel numerics, analytic ring timing.
    const Precision precision = config.reduce_precision;
    std::vector<PseudoGradient> locals;
    locals.reserve(k);
    for (DilocoEngine& engine : engines) {
      locals.push_back(engine.compute_pseudo_gradient());
    }
    std::vector<const ParamVector*> contributions;
    contributions.reserve(k);
    for (const PseudoGradient& pg : locals) {
      contributions.push_back(&pg.delta);
    }
    PseudoGradient reduced;
    reduced.delta = reduce_average(contributions, precision);
    reduced.precision = precision;
    reduced.outer_epoch = locals[0].outer_epoch;

    const uint64_t payload =
        params.comm_payload_bytes_override != 0
            ? params.comm_payload_bytes_override
            : payload_bytes(model_elems, precision);
    const double reduce_time = ring_reduce_time_s(params.links, k, payload);
    const uint64_t round_bytes =
        k > 1 ? 2 * static_cast<uint64_t>(k - 1) *
                    payload_bytes(model_elems, precision)
              : 0;
    result.reduce_data_bytes += round_bytes;

    clock.schedule_at(barrier_time + reduce_time, [&] {
      for (DilocoEngine& engine : engines) {
        engine.outer_step(reduced);
      }
    });
    clock.run();

    for (size_t w = 0; w < k; ++w) {
      result.ledger.workers[w].comm_seconds += reduce_time;
      if (sink) {
        MetricsRecord record;
        record.kind = RecordKind::round;
        record.worker = static_cast<int>(w);
        record.inner_step = engines[w].state().inner_step;
        record.outer_epoch = engines[w].state().outer_epoch;
        record.loss = result.final_losses[w];
        record.perplexity = perplexity(result.final_losses[w]);
        record.comm_ms = reduce_time * 1000.0;
        record.bytes_sent = k > 1 ? per_peer_reduce_bytes(
                                        model_elems, k, w, precision)
                                  : 0;
        record.contributors = k;
        sink(record);
      }
    }
    result.rounds += 1;
    round_start = clock.now();
    result.wall_seconds = clock.now();
    if (params.on_round_end) {
      params.on_round_end(result.rounds, result);
    }
  }

  result.wall_seconds = clock.now();
  return result;
}

}  // namespace diloco
