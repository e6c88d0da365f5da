// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat, typed key-value run configuration. Keys carry explicit units in
// their names; unknown keys are hard errors. A config plus its seed fully
// determines a simulated run.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diloco/collective.hpp"
#include "diloco/engine.hpp"

namespace diloco {

enum class RunMode { worker, simulate, baseline_dp, baseline_single };

RunMode run_mode_from_string(const std::string& name);
std::string to_string(RunMode mode);

struct RunConfig {
  RunMode mode = RunMode::simulate;
  TaskSpec task;
  DilocoConfig diloco;
  OptimHyperparams optim;
  uint64_t seed = 1;

  // Simulated transport.
  std::string network_file;  // empty: uniform link matrix below
  double sim_bandwidth_mbits = 1000.0;
  double sim_latency_ms = 0.0;
  double step_time_base_s = 0.0;
  std::vector<double> step_time_multipliers;
  double step_time_jitter_frac = 0.0;
  uint64_t comm_payload_bytes = 0;  // 0: actual model payload

  // Output.
  std::string metrics_path = "metrics.jsonl";
  std::string checkpoint_path;
  uint64_t checkpoint_every_rounds = 0;
  size_t eval_size = 2048;

  // Worker mode.
  std::string run_id = "diloco";
  std::string listen = "127.0.0.1:0";
  std::string rendezvous;  // empty: bootstrap a new run
  size_t worker_index = 0;
  size_t quorum_min = 1;
  size_t chunk_size_bytes = 1 << 20;
  int heartbeat_interval_ms = 100;
  int suspect_after_ms = 600;
  int evict_after_ms = 2500;
  int barrier_timeout_ms = 2000;
  int reduce_timeout_ms = 3000;
  int commit_timeout_ms = 1500;

  NodeOptions node_options() const;
};

/// Parse `key = value` lines ('#' comments). Throws ConfigError with the
/// offending key name on unknown keys or bad values.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);

/// Apply one `key=value` override on top of an existing config.
void apply_override(RunConfig& config, const std::string& key,
                    const std::string& value);

/// Canonical text form: every key, sorted, normalized values.
std::string canonical_config(const RunConfig& config);

/// FNV-1a of the canonical form; stamped into checkpoints.
uint64_t config_hash(const RunConfig& config);

}  // namespace diloco
