// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/engine.hpp"

#include <chrono>
#include <cmath>

namespace diloco {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

ParamVector scale_gradient(const ParamVector& grad, float scale) {
  std::vector<float> out(grad.size());
  std::span<const float> g = grad.values();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = g[i] * scale;
  }
  return ParamVector(grad.layout(), std::move(out));
}

}  // namespace

void DilocoConfig::validate() const {
  if (local_steps_h < 1) {
    throw ConfigError("local_steps must be >= 1");
  }
  if (num_workers_k < 1) {
    throw ConfigError("num_workers must be >= 1");
  }
  if (batch_size < 1) {
    throw ConfigError("batch_size must be >= 1");
  }
  if (total_inner_steps == 0 || total_inner_steps % local_steps_h != 0) {
    throw ConfigError(
        "total_inner_steps (" + std::to_string(total_inner_steps) +
        ") must be a positive multiple of local_steps (" +
        std::to_string(local_steps_h) + "); trailing partial windows are "
        "rejected so communication accounting stays exact");
  }
}

InnerStepResult apply_inner_step(const TaskSpec& task, const Batch& batch,
                                 ParamVector& params, AdamWState& adam,
                                 LossScaler& scaler,
                                 const LrSchedule& schedule) {
  const LossGrad lg = loss_and_grad(task, params, batch);
  // Closed-form backward of the scaled loss is the scaled gradient.
  const ParamVector scaled = scale_gradient(lg.grad, scaler.scale);
  UnscaleResult unscaled = scaler_unscale_and_check(scaler, scaled);

  InnerStepResult result;
  result.loss = lg.loss;
  result.overflow_skipped = unscaled.overflow;
  if (!unscaled.overflow) {
    // Schedule is indexed by applied optimizer steps, 1-based.
    result.lr = lr_at(schedule, adam.step_count + 1);
    params = adamw_step(adam, params, unscaled.grad, result.lr);
  }
  scaler_update(scaler, unscaled.overflow);
  return result;
}

DilocoEngine::DilocoEngine(DilocoConfig config, TaskSpec task, ShardDesc shard,
                           const OptimHyperparams& hyper)
    : config_(config), task_(task), shard_(shard) {
  config_.validate();
  schedule_.warmup_steps = hyper.warmup_steps;
  schedule_.total_steps = config_.total_inner_steps;
  schedule_.base_lr = hyper.inner_lr;
  schedule_.decay = hyper.lr_decay;

  state_.theta_t = init_params(task_);
  state_.theta_local = state_.theta_t;
  state_.inner = AdamWState::init(state_.theta_t.layout(), hyper.beta1,
                                  hyper.beta2, hyper.adam_eps,
                                  hyper.weight_decay);
  state_.outer = NesterovState::init(state_.theta_t.layout(), hyper.outer_lr,
                                     hyper.outer_momentum);
  state_.scaler.scale = hyper.scaler_init_scale;
  state_.scaler.growth_interval = hyper.scaler_growth_interval;
}

Batch DilocoEngine::next_batch() const {
  return make_batch(task_, shard_, state_.inner_step * config_.batch_size,
                    config_.batch_size);
}

InnerStepResult DilocoEngine::inner_step(const Batch& batch) {
  if (finished()) {
    throw Error("inner_step called after total_inner_steps");
  }
  InnerStepResult result = apply_inner_step(
      task_, batch, state_.theta_local, state_.inner, state_.scaler,
      schedule_);
  state_.inner_step += 1;
  return result;
}

bool DilocoEngine::at_window_boundary() const {
  return state_.inner_step % config_.local_steps_h == 0;
}

bool DilocoEngine::finished() const {
  return state_.inner_step >= config_.total_inner_steps;
}

PseudoGradient DilocoEngine::compute_pseudo_gradient() const {
  if (!at_window_boundary()) {
    throw Error("pseudo-gradient requested mid-window (inner_step " +
                std::to_string(state_.inner_step) + ", H " +
                std::to_string(config_.local_steps_h) + ")");
  }
  PseudoGradient pg;
  pg.delta = axpy(-1.0f, state_.theta_local, state_.theta_t);
  pg.precision = config_.reduce_precision;
  pg.outer_epoch = state_.outer_epoch;
  return pg;
}

OuterStepResult DilocoEngine::outer_step(const PseudoGradient& reduced) {
  if (reduced.outer_epoch != state_.outer_epoch) {
    throw CollectiveError(
        "outer_step: reduced pseudo-gradient from epoch " +
        std::to_string(reduced.outer_epoch) + " applied at epoch " +
        std::to_string(state_.outer_epoch));
  }
  OuterStepResult result;
  if (reduced.delta.all_finite()) {
    state_.theta_t = nesterov_step(state_.outer, state_.theta_t,
                                   reduced.delta);
    result.applied = true;
  }
  // Non-finite reduction: keep theta_t, discard local progress. Either
  // way the new window starts from identical weights on every worker.
  state_.theta_local = state_.theta_t;
  state_.outer_epoch += 1;
  return result;
}

void DilocoEngine::restore_state(EngineState state) {
  if (!state.theta_t.same_layout(state_.theta_t) ||
      !state.theta_local.same_layout(state_.theta_t) ||
      !state.inner.m.same_layout(state_.theta_t) ||
      !state.inner.v.same_layout(state_.theta_t) ||
      !state.outer.momentum_buf.same_layout(state_.theta_t)) {
    throw ShapeError("restore_state: checkpoint layout mismatch");
  }
  state_ = std::move(state);
}

DilocoOptimizer::DilocoOptimizer(DilocoEngine& engine, Collective& collective)
    : engine_(engine), collective_(collective) {}

InnerStepResult DilocoOptimizer::step(const Batch& batch) {
  InnerStepResult result = engine_.inner_step(batch);
  round_completed_ = false;
  if (engine_.at_window_boundary()) {
    const PseudoGradient local = engine_.compute_pseudo_gradient();
    last_report_ = ReduceReport{};
    const PseudoGradient reduced =
        collective_.all_reduce_avg(local, &last_report_);
    last_applied_ = engine_.outer_step(reduced).applied;
    round_completed_ = true;
  }
  return result;
}

RunResult run_training(DilocoEngine& engine, Collective& collective,
                       const MetricsSink& sink, int worker_index,
                       const std::function<void(uint64_t)>& on_round) {
  DilocoOptimizer optimizer(engine, collective);
  RunResult run;
  while (!engine.finished()) {
    const auto compute_start = Clock::now();
    const Batch batch = engine.next_batch();
    const InnerStepResult step = optimizer.step(batch);
    const double total_ms = ms_since(compute_start);

    run.steps_done += 1;
    run.final_train_loss = step.loss;

    MetricsRecord record;
    record.kind = RecordKind::step;
    record.worker = worker_index;
    record.inner_step = engine.state().inner_step;
    record.outer_epoch = engine.state().outer_epoch;
    record.loss = step.loss;
    record.perplexity = perplexity(step.loss);
    record.lr = step.lr;
    if (step.overflow_skipped && sink) {
      MetricsRecord event = record;
      event.kind = RecordKind::event;
      event.event = "inner_overflow_skip";
      sink(event);
    }

    if (optimizer.round_just_completed()) {
      const ReduceReport& report = optimizer.last_round();
      run.rounds_done += 1;
      run.reduce_data_bytes += report.data_bytes_sent;
      run.reduce_wire_bytes += report.wire_bytes_sent;
      run.comm_ms += report.wall_ms;
      record.compute_ms = total_ms - report.wall_ms;
      run.compute_ms += record.compute_ms;
      if (sink) {
        sink(record);
        MetricsRecord round = record;
        round.kind = RecordKind::round;
        round.comm_ms = report.wall_ms;
        round.bytes_sent = report.data_bytes_sent;
        round.contributors = report.contributors;
        sink(round);
        if (!optimizer.last_round_applied()) {
          MetricsRecord event = round;
          event.kind = RecordKind::event;
          event.event = "outer_skip_nonfinite";
          sink(event);
        }
      }
      if (on_round) {
        on_round(run.rounds_done);
      }
    } else {
      record.compute_ms = total_ms;
      run.compute_ms += total_ms;
      if (sink) {
        sink(record);
      }
    }
  }
  return run;
}

}  // namespace diloco
