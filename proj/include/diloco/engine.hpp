// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual-optimizer orchestration behind a single-optimizer facade: run H
// AdamW steps on the local weights, form the pseudo-gradient
// delta = theta_t - theta_local, all-reduce it, apply one Nesterov step to
// theta_t, then restart the window from the new theta_t. The loss scaler
// wraps inner steps only; outer steps are never scaled.

#pragma once

#include <cstdint>
#include <functional>

#include "diloco/metrics.hpp"
#include "diloco/optim.hpp"
#include "diloco/reduce.hpp"
#include "diloco/task.hpp"

namespace diloco {

struct DilocoConfig {
  uint64_t local_steps_h = 500;
  size_t num_workers_k = 1;
  Precision reduce_precision = Precision::fp32;
  uint64_t total_inner_steps = 0;
  size_t batch_size = 1;

  /// Throws ConfigError on H < 1, K < 1, zero batch, or a trailing
  /// partial window (total_inner_steps not divisible by H).
  void validate() const;
};

struct OptimHyperparams {
  float inner_lr = 4e-4f;
  uint64_t warmup_steps = 1000;
  LrDecay lr_decay = LrDecay::none;
  float weight_decay = 0.1f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float adam_eps = 1e-8f;
  float outer_lr = 0.7f;
  float outer_momentum = 0.9f;
  float scaler_init_scale = 65536.0f;
  uint64_t scaler_growth_interval = 2000;
};

struct EngineState {
  ParamVector theta_t;      // outer weights; frozen between outer rounds
  ParamVector theta_local;  // theta(t+h), advanced by the inner optimizer
  AdamWState inner;
  NesterovState outer;
  LossScaler scaler;
  uint64_t inner_step = 0;  // batches consumed (data cursor)
  uint64_t outer_epoch = 0;
};

struct InnerStepResult {
  float loss = 0.0f;
  float lr = 0.0f;
  bool overflow_skipped = false;
};

/// One scaled forward/backward + AdamW update, shared by the engine and
/// the plain baselines so identical configs stay bitwise identical.
/// On overflow the optimizer state is untouched and the step is skipped.
InnerStepResult apply_inner_step(const TaskSpec& task, const Batch& batch,
                                 ParamVector& params, AdamWState& adam,
                                 LossScaler& scaler,
                                 const LrSchedule& schedule);

struct OuterStepResult {
  bool applied = false;  // false when a non-finite reduction was skipped
};

class DilocoEngine {
 public:
  DilocoEngine(DilocoConfig config, TaskSpec task, ShardDesc shard,
               const OptimHyperparams& hyper);

  /// Inner training step on theta_local; theta_t is untouched. The data
  /// cursor always advances; the optimizer state only on clean steps.
  InnerStepResult inner_step(const Batch& batch);

  /// Batch at the engine's current data cursor.
  Batch next_batch() const;

  /// delta = theta_t - theta_local, tagged with the current outer epoch.
  /// Only valid at a window boundary.
  PseudoGradient compute_pseudo_gradient() const;

  /// Apply the fleet-averaged pseudo-gradient: Nesterov step on theta_t,
  /// theta_local re-snapshotted from the new theta_t, epoch advanced.
  /// A non-finite reduction skips the step and resets theta_local.
  /// Throws CollectiveError when the epoch tag does not match.
  OuterStepResult outer_step(const PseudoGradient& reduced);

  bool at_window_boundary() const;
  bool finished() const;

  const DilocoConfig& config() const { return config_; }
  const TaskSpec& task() const { return task_; }
  const ShardDesc& shard() const { return shard_; }
  const LrSchedule& schedule() const { return schedule_; }
  const EngineState& state() const { return state_; }

  /// Checkpoint restore path; validates layouts.
  void restore_state(EngineState state);

 private:
  DilocoConfig config_;
  TaskSpec task_;
  ShardDesc shard_;
  LrSchedule schedule_;
  EngineState state_;
};

/// Single-optimizer facade: call step() once per batch; the outer round
/// (barrier, all-reduce, outer step) triggers automatically after every
/// H-th inner step. zero_grad() exists for training-loop compatibility and
/// does nothing: gradients never persist between steps here.
class DilocoOptimizer {
 public:
  DilocoOptimizer(DilocoEngine& engine, Collective& collective);

  InnerStepResult step(const Batch& batch);
  void zero_grad() {}

  /// Report of the most recent outer round, if any.
  const ReduceReport& last_round() const { return last_report_; }
  bool round_just_completed() const { return round_completed_; }
  bool last_round_applied() const { return last_applied_; }

 private:
  DilocoEngine& engine_;
  Collective& collective_;
  ReduceReport last_report_;
  bool round_completed_ = false;
  bool last_applied_ = false;
};

struct RunResult {
  uint64_t steps_done = 0;
  uint64_t rounds_done = 0;
  float final_train_loss = 0.0f;
  uint64_t reduce_data_bytes = 0;
  uint64_t reduce_wire_bytes = 0;
  double comm_ms = 0.0;
  double compute_ms = 0.0;
};

/// Full training loop: total_inner_steps inner steps with an outer round
/// every H, emitting one record per step and per round through `sink`.
/// `on_round` fires after each completed outer round (checkpoint hook).
RunResult run_training(DilocoEngine& engine, Collective& collective,
                       const MetricsSink& sink, int worker_index = 0,
                       const std::function<void(uint64_t)>& on_round = {});

}  // namespace diloco
