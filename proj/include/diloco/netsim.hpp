// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic virtual-time transport model and the compute-utilization
// accounting for simulated runs. No real clocks anywhere: time advances
// only through the event queue, so simulated runs are bit-reproducible.

#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <string>
#include <vector>

#include "diloco/engine.hpp"

namespace diloco {

/// Per-pair bandwidth (Mbit/s) and latency (ms). The diagonal is unused.
class LinkMatrix {
 public:
  LinkMatrix() = default;
  LinkMatrix(std::vector<std::string> names, std::vector<double> bw_mbits,
             std::vector<double> latency_ms);

  static LinkMatrix uniform(size_t k, double bandwidth_mbits,
                            double latency_ms);
  /// Plain-text table: a `workers:` line, one bandwidth row per worker
  /// ('-' on the diagonal), optional uniform `latency_ms:` line.
  static LinkMatrix load_file(const std::string& path);
  static LinkMatrix parse(const std::string& text);

  size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  double bandwidth_mbits(size_t i, size_t j) const;
  double latency_ms(size_t i, size_t j) const;

 private:
  std::vector<std::string> names_;
  std::vector<double> bandwidth_;  // k*k row-major
  std::vector<double> latency_;    // k*k row-major
};

/// latency + bytes * 8 / (bandwidth_mbits * 1e6), in seconds.
/// Throws ConfigError on non-positive bandwidth.
double transfer_time_s(uint64_t bytes, double bandwidth_mbits,
                       double latency_ms);

/// Virtual ring all-reduce duration: 2(K-1) synchronized steps, each gated
/// by the slowest active ring edge. Matches the cost law the socket
/// transport obeys in bytes.
double ring_reduce_time_s(const LinkMatrix& links, size_t k,
                          uint64_t payload_bytes);

/// Discrete-event clock. Events fire in (time, insertion) order.
class VirtualClock {
 public:
  void schedule_at(double time_s, std::function<void()> action);
  void schedule_in(double delay_s, std::function<void()> action);
  /// Run until the queue drains.
  void run();
  double now() const { return now_; }

 private:
  struct Event {
    double time_s;
    uint64_t seq;
    std::function<void()> action;

    bool operator>(const Event& other) const {
      return std::tie(time_s, seq) > std::tie(other.time_s, other.seq);
    }
  };

  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
  double now_ = 0.0;
  uint64_t next_seq_ = 0;
};

struct WorkerLedger {
  double compute_seconds = 0.0;
  double comm_seconds = 0.0;
  double idle_seconds = 0.0;
};

/// The three buckets partition each worker's wall time.
struct UtilizationLedger {
  std::vector<WorkerLedger> workers;

  double compute_seconds() const;
  double comm_seconds() const;
  double idle_seconds() const;
  double wall_seconds() const;  // sum of buckets / worker count
};

/// compute / (compute + comm + idle). Total time must be positive.
double utilization(const UtilizationLedger& ledger);
double utilization(double compute_s, double comm_s, double idle_s);

/// Per-worker inner-step durations: base * multiplier[w] * (1 +- jitter),
/// jitter drawn from (seed, "steptime", worker) counter streams.
struct StepTimeModel {
  double base_step_s = 1.0;
  std::vector<double> multipliers;  // empty = all 1.0
  double jitter_frac = 0.0;
  uint64_t seed = 0;

  double step_seconds(size_t worker, uint64_t step) const;
};

struct SimResult;

struct SimParams {
  StepTimeModel step_time;
  LinkMatrix links;
  /// When nonzero, communication timing uses this payload size instead of
  /// the actual model payload (scaled-down models, full-size networks).
  uint64_t comm_payload_bytes_override = 0;

  // Resume support: continue from a checkpointed round with carried-over
  // clock and accounting.
  uint64_t first_round = 0;
  double clock_start_s = 0.0;
  std::vector<WorkerLedger> initial_ledger;
  uint64_t initial_reduce_bytes = 0;

  /// Invoked after each completed round (checkpoint hook).
  std::function<void(uint64_t completed_rounds, const SimResult& so_far)>
      on_round_end;
};

struct SimResult {
  UtilizationLedger ledger;
  uint64_t rounds = 0;
  uint64_t reduce_data_bytes = 0;  // fleet-wide scalar payload
  double wall_seconds = 0.0;
  std::vector<float> final_losses;  // last train loss per worker
};

/// Execute a full K-worker run under virtual time. Engines carry the
/// numerics (weights stay bitwise identical to any other transport); the
/// link matrix and step-time model drive the clock and the ledger.
SimResult run_simulated(std::vector<DilocoEngine>& engines,
                        const SimParams& params, const MetricsSink& sink);

}  // namespace diloco
