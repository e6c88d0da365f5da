// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Inner AdamW, outer SGD with Nesterov momentum, warmup learning-rate
// schedule and the dynamic loss scaler. The scaler wraps inner steps only;
// outer steps consume manually computed FP32 pseudo-gradients and are
// never scaled.

#pragma once

#include <cstdint>

#include "diloco/tensor.hpp"

namespace diloco {

struct AdamWState {
  ParamVector m;  // first moment
  ParamVector v;  // second moment, elementwise >= 0
  uint64_t step_count = 0;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float eps = 1e-8f;
  float weight_decay = 0.1f;

  static AdamWState init(LayoutPtr layout, float beta1, float beta2, float eps,
                         float weight_decay);
};

struct NesterovState {
  ParamVector momentum_buf;  // starts at zero
  float lr = 0.7f;
  float momentum = 0.9f;

  static NesterovState init(LayoutPtr layout, float lr, float momentum);
};

enum class LrDecay { none, cosine };

struct LrSchedule {
  uint64_t warmup_steps = 1000;
  uint64_t total_steps = 0;
  float base_lr = 4e-4f;
  LrDecay decay = LrDecay::none;
};

/// Learning rate at a (1-based during training) step index: linear ramp
/// to base_lr over warmup_steps, then constant or cosine decay to 10% of
/// base_lr at total_steps.
float lr_at(const LrSchedule& schedule, uint64_t step);

struct LossScaler {
  float scale = 65536.0f;  // power of two
  uint64_t growth_interval = 2000;
  uint64_t consecutive_good = 0;
};

/// One decoupled-weight-decay Adam step. Returns new params; state is
/// updated in place (single-owner). Throws NumericError on non-finite
/// gradients; overflow handling belongs to the scaler, before this call.
ParamVector adamw_step(AdamWState& state, const ParamVector& params,
                       const ParamVector& grad, float lr);

/// buf <- mu * buf + g; params <- params - lr * (g + mu * buf).
ParamVector nesterov_step(NesterovState& state, const ParamVector& params,
                          const ParamVector& pseudo_grad);

float scaler_scale_loss(const LossScaler& scaler, float loss);

/// Divide gradients by the scale and report whether any element is
/// non-finite. Overflow is a signal, not a failure.
struct UnscaleResult {
  ParamVector grad;
  bool overflow = false;
};
UnscaleResult scaler_unscale_and_check(const LossScaler& scaler,
                                       const ParamVector& grad);

/// Halve on overflow, double after growth_interval clean steps.
void scaler_update(LossScaler& scaler, bool overflow);

}  // namespace diloco
