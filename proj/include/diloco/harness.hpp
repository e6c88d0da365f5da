// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: the four run modes, the ablation suite with
// its seed-noise band, the all-reduce bench and CSV exports. Everything a
// figure-level claim needs is recomputed from metrics files, so analyses
// re-run without re-training.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diloco/config.hpp"
#include "diloco/metrics.hpp"
#include "diloco/netsim.hpp"

namespace diloco {

/// Execute the configured run and write metrics + summary JSONL.
/// simulate/baseline modes are single-threaded and deterministic;
/// worker mode drives one peer over real sockets.
RunSummary run_experiment(const RunConfig& config);

/// Continue a simulate-mode run from its checkpoint; the metrics file
/// receives exactly the records the uninterrupted run would emit from the
/// checkpointed round onward.
RunSummary resume_experiment(const RunConfig& config,
                             const std::string& checkpoint_path);

struct AblationRow {
  std::string axis_value;
  uint64_t seed = 0;
  float final_loss = 0.0f;
  float final_perplexity = 1.0f;
  uint64_t reduce_data_bytes = 0;
  uint64_t outer_rounds = 0;
  std::string metrics_path;
};

struct AblationTable {
  std::string axis;
  std::vector<AblationRow> rows;

  /// Mean final loss across seeds for one axis value.
  double mean_final_loss(const std::string& axis_value) const;
  /// Seed-noise band: the largest half-range of final loss across seeds
  /// observed at any single axis value.
  double noise_band() const;
  std::vector<std::string> axis_values() const;  // in first-seen order
};

/// Cross product of values x seeds in simulate mode. Writes per-run
/// metrics files under output_dir plus table.json, table.csv and
/// curves.csv (per-step losses keyed by local and global step).
AblationTable ablation_suite(const RunConfig& base, const std::string& axis,
                             const std::vector<std::string>& values,
                             const std::vector<uint64_t>& seeds,
                             const std::string& output_dir);

/// Rebuild the table from an output directory's metrics files alone.
AblationTable analyze_ablation(const std::string& output_dir);

struct BenchReport {
  size_t workers = 0;
  uint64_t payload_bytes_requested = 0;
  Precision precision = Precision::fp32;
  std::string transport;
  double wall_ms = 0.0;
  double analytic_time_s = 0.0;  // simulated transport only
  std::vector<uint64_t> per_peer_data_bytes;
  uint64_t analytic_per_peer_bytes = 0;  // rank-0 reference
  bool agreement = false;
};

/// One timed all-reduce round over `transport` ("tcp" or "sim").
BenchReport bench_allreduce(size_t workers, uint64_t payload_bytes_target,
                            Precision precision, const std::string& transport,
                            double bandwidth_mbits = 1000.0,
                            double latency_ms = 0.0);

}  // namespace diloco
