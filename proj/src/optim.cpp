// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/optim.hpp"

#include <cmath>

namespace diloco {

namespace {
// Smallest scale the loss scaler may reach; keeps the power-of-two
// invariant instead of underflowing to zero after repeated overflows.
constexpr float kMinScale = 0x1p-20f;
constexpr float kMaxScale = 0x1p24f;
}  // namespace

AdamWState AdamWState::init(LayoutPtr layout, float beta1, float beta2,
                            float eps, float weight_decay) {
  AdamWState state;
  state.m = ParamVector::zeros(layout);
  state.v = ParamVector::zeros(std::move(layout));
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.eps = eps;
  state.weight_decay = weight_decay;
  return state;
}

NesterovState NesterovState::init(LayoutPtr layout, float lr, float momentum) {
  NesterovState state;
  state.momentum_buf = ParamVector::zeros(std::move(layout));
  state.lr = lr;
  state.momentum = momentum;
  return state;
}

float lr_at(const LrSchedule& schedule, uint64_t step) {
  const float base = schedule.base_lr;
  if (schedule.warmup_steps > 0 && step <= schedule.warmup_steps) {
    return base * static_cast<float>(step) /
           static_cast<float>(schedule.warmup_steps);
  }
  if (schedule.decay == LrDecay::none || schedule.total_steps == 0 ||
      schedule.total_steps <= schedule.warmup_steps) {
    return base;
  }
  const float floor = 0.1f * base;
  if (step >= schedule.total_steps) {
    return floor;
  }
  const double progress =
      static_cast<double>(step - schedule.warmup_steps) /
      static_cast<double>(schedule.total_steps - schedule.warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(progress * M_PI));
  return static_cast<float>(floor + (base - floor) * cosine);
}

ParamVector adamw_step(AdamWState& state, const ParamVector& params,
                       const ParamVector& grad, float lr) {
  if (!params.same_layout(grad) || !params.same_layout(state.m)) {
    throw ShapeError("adamw_step: layout mismatch");
  }
  if (lr < 0.0f) {
    throw ConfigError("adamw_step: negative learning rate");
  }
  if (!grad.all_finite()) {
    throw NumericError("adamw_step: non-finite gradient");
  }
  state.step_count += 1;
  const float b1 = state.beta1;
  const float b2 = state.beta2;
  // Bias corrections at the new step count.
  const float corr1 =
      1.0f - std::pow(b1, static_cast<float>(state.step_count));
  const float corr2 =
      1.0f - std::pow(b2, static_cast<float>(state.step_count));

  std::span<float> m = state.m.mutable_values();
  std::span<float> v = state.v.mutable_values();
  std::span<const float> g = grad.values();
  std::span<const float> p = params.values();
  std::vector<float> out(p.size());
  for (size_t i = 0; i < out.size(); ++i) {
    m[i] = b1 * m[i] + (1.0f - b1) * g[i];
    v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
    const float m_hat = m[i] / corr1;
    const float v_hat = v[i] / corr2;
    const float update =
        m_hat / (std::sqrt(v_hat) + state.eps) + state.weight_decay * p[i];
    out[i] = p[i] - lr * update;
  }
  return ParamVector(params.layout(), std::move(out));
}

ParamVector nesterov_step(NesterovState& state, const ParamVector& params,
                          const ParamVector& pseudo_grad) {
  if (!params.same_layout(pseudo_grad) ||
      !params.same_layout(state.momentum_buf)) {
    throw ShapeError("nesterov_step: layout mismatch");
  }
  if (!pseudo_grad.all_finite()) {
    throw NumericError("nesterov_step: non-finite pseudo-gradient");
  }
  const float mu = state.momentum;
  const float lr = state.lr;
  std::span<float> buf = state.momentum_buf.mutable_values();
  std::span<const float> g = pseudo_grad.values();
  std::span<const float> p = params.values();
  std::vector<float> out(p.size());
  for (size_t i = 0; i < out.size(); ++i) {
    buf[i] = mu * buf[i] + g[i];
    out[i] = p[i] - lr * (g[i] + mu * buf[i]);
  }
  return ParamVector(params.layout(), std::move(out));
}

float scaler_scale_loss(const LossScaler& scaler, float loss) {
  return loss * scaler.scale;
}

UnscaleResult scaler_unscale_and_check(const LossScaler& scaler,
                                       const ParamVector& grad) {
  UnscaleResult result;
  const float inv = 1.0f / scaler.scale;  // scale is a power of two: exact
  std::vector<float> out(grad.size());
  std::span<const float> g = grad.values();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = g[i] * inv;
    if (!std::isfinite(out[i])) {
      result.overflow = true;
    }
  }
  result.grad = ParamVector(grad.layout(), std::move(out));
  return result;
}

void scaler_update(LossScaler& scaler, bool overflow) {
  if (overflow) {
    scaler.scale = std::max(scaler.scale * 0.5f, kMinScale);
    scaler.consecutive_good = 0;
    return;
  }
  scaler.consecutive_good += 1;
  if (scaler.consecutive_good >= scaler.growth_interval) {
    scaler.scale = std::min(scaler.scale * 2.0f, kMaxScale);
    scaler.consecutive_good = 0;
  }
}

}  // namespace diloco
