// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diloco/optim.hpp"
#include "diloco/rng.hpp"
#include "support/optim_oracle.hpp"

using namespace diloco;
using diloco::testing::ScalarAdamW;
using diloco::testing::ScalarNesterov;

namespace {

ParamVector vec(std::vector<float> data) {
  auto layout = Layout::single("p", data.size());
  return ParamVector(std::move(layout), std::move(data));
}

AdamWState make_adam(size_t n, float wd) {
  return AdamWState::init(Layout::single("p", n), 0.9f, 0.95f, 1e-8f, wd);
}

}  // namespace

TEST_CASE("adamw null gradient is the identity without weight decay") {
  AdamWState state = make_adam(3, 0.0f);
  const ParamVector params = vec({1.0f, -2.0f, 0.5f});
  const ParamVector updated =
      adamw_step(state, params, vec({0, 0, 0}), 4e-4f);
  CHECK(updated == params);
  CHECK(state.step_count == 1);
}

TEST_CASE("adamw first step matches the scalar recurrence") {
  AdamWState state = make_adam(1, 0.1f);
  const ParamVector updated =
      adamw_step(state, vec({1.0f}), vec({0.1f}), 4e-4f);

  ScalarAdamW oracle{0.9f, 0.95f, 1e-8f, 0.1f};
  const float expected = oracle.step(1.0f, 0.1f, 4e-4f);
  CHECK(updated[0] == expected);
  // The recurrence by hand: m_hat=0.1, v_hat=0.01,
  // w' = 1 - 4e-4 * (0.1/(0.1+1e-8) + 0.1) ~= 0.99956.
  CHECK(updated[0] == doctest::Approx(0.99956f).epsilon(1e-6));
}

TEST_CASE("adamw is deterministic") {
  auto run = [] {
    AdamWState state = make_adam(2, 0.1f);
    ParamVector params = vec({1.0f, -1.0f});
    for (int i = 0; i < 10; ++i) {
      params = adamw_step(state, params, vec({0.1f, -0.2f}), 1e-3f);
    }
    return params;
  };
  CHECK(run() == run());
}

TEST_CASE("adamw against scalar oracle over random draws") {
  CounterRng rng(17, "adamw-oracle", 0);
  for (int trial = 0; trial < 1000; ++trial) {
    const float w0 = rng.next_uniform(-2.0f, 2.0f);
    const float wd = rng.next_uniform(0.0f, 0.2f);
    const float lr = rng.next_uniform(0.0f, 0.01f);
    AdamWState state = make_adam(1, wd);
    ScalarAdamW oracle{state.beta1, state.beta2, state.eps, wd};
    float w = w0;
    for (int step = 0; step < 5; ++step) {
      const float g = rng.next_uniform(-1.0f, 1.0f);
      const ParamVector updated = adamw_step(state, vec({w}), vec({g}), lr);
      const float expected = oracle.step(w, g, lr);
      REQUIRE(std::fabs(static_cast<double>(updated[0]) -
                        static_cast<double>(expected)) <= 1e-12);
      w = updated[0];
    }
  }
}

TEST_CASE("adamw rejects non-finite gradients") {
  AdamWState state = make_adam(1, 0.0f);
  CHECK_THROWS_AS(adamw_step(state, vec({1.0f}), vec({INFINITY}), 1e-3f),
                  NumericError);
  CHECK(state.step_count == 0);
}

TEST_CASE("nesterov first step from zero momentum") {
  NesterovState state = NesterovState::init(Layout::single("p", 1), 0.7f,
                                            0.9f);
  const ParamVector updated =
      nesterov_step(state, vec({10.0f}), vec({1.0f}));
  CHECK(state.momentum_buf[0] == 1.0f);
  // theta' = 10 - 0.7 * (1 + 0.9 * 1) = 8.67
  CHECK(updated[0] == doctest::Approx(8.67f).epsilon(1e-6));
}

TEST_CASE("nesterov with zero momentum and unit lr is a plain step") {
  NesterovState state = NesterovState::init(Layout::single("p", 2), 1.0f,
                                            0.0f);
  const ParamVector theta = vec({1.25f, -3.5f});
  const ParamVector g = vec({0.25f, 0.5f});
  const ParamVector updated = nesterov_step(state, theta, g);
  CHECK(updated == vec({1.0f, -4.0f}));  // bitwise for exact inputs
}

TEST_CASE("nesterov momentum buffer follows the recurrence") {
  NesterovState state = NesterovState::init(Layout::single("p", 1), 0.7f,
                                            0.9f);
  ParamVector theta = vec({0.0f});
  const float expected_buf[3] = {1.0f, 1.9f, 2.71f};
  for (int i = 0; i < 3; ++i) {
    theta = nesterov_step(state, theta, vec({1.0f}));
    CHECK(state.momentum_buf[0] ==
          doctest::Approx(expected_buf[i]).epsilon(1e-6));
  }
}

TEST_CASE("nesterov against scalar oracle over random draws") {
  CounterRng rng(18, "nesterov-oracle", 0);
  for (int trial = 0; trial < 1000; ++trial) {
    const float lr = rng.next_uniform(0.0f, 1.0f);
    const float mu = rng.next_uniform(0.0f, 0.99f);
    NesterovState state = NesterovState::init(Layout::single("p", 1), lr, mu);
    ScalarNesterov oracle{lr, mu};
    float w = rng.next_uniform(-5.0f, 5.0f);
    for (int step = 0; step < 4; ++step) {
      const float g = rng.next_uniform(-1.0f, 1.0f);
      const ParamVector updated = nesterov_step(state, vec({w}), vec({g}));
      const float expected = oracle.step(w, g);
      REQUIRE(std::fabs(static_cast<double>(updated[0]) -
                        static_cast<double>(expected)) <= 1e-12);
      w = updated[0];
    }
  }
}

TEST_CASE("learning rate schedule") {
  LrSchedule schedule;
  schedule.warmup_steps = 1000;
  schedule.total_steps = 10000;
  schedule.base_lr = 4e-4f;
  schedule.decay = LrDecay::none;

  CHECK(lr_at(schedule, 500) == doctest::Approx(2e-4f).epsilon(1e-7));
  CHECK(lr_at(schedule, 1000) == 4e-4f);
  CHECK(lr_at(schedule, 5000) == 4e-4f);

  schedule.decay = LrDecay::cosine;
  CHECK(lr_at(schedule, 1000) == 4e-4f);  // continuous at the boundary
  CHECK(lr_at(schedule, 10000) == doctest::Approx(4e-5f).epsilon(1e-6));
  CHECK(lr_at(schedule, 20000) == doctest::Approx(4e-5f).epsilon(1e-6));

  // Monotone nondecreasing over the warmup.
  float prev = lr_at(schedule, 0);
  CHECK(prev == 0.0f);
  for (uint64_t step = 1; step <= 1000; ++step) {
    const float lr = lr_at(schedule, step);
    CHECK(lr >= prev);
    prev = lr;
  }
}

TEST_CASE("loss scaler halves on overflow and doubles after clean window") {
  LossScaler scaler;
  scaler.scale = 65536.0f;
  scaler.growth_interval = 2000;

  CHECK(scaler_scale_loss(scaler, 2.0f) == 131072.0f);
  LossScaler unit = scaler;
  unit.scale = 1.0f;
  CHECK(scaler_scale_loss(unit, 3.25f) == 3.25f);

  const UnscaleResult bad =
      scaler_unscale_and_check(scaler, vec({INFINITY, 1.0f}));
  CHECK(bad.overflow);
  scaler_update(scaler, bad.overflow);
  CHECK(scaler.scale == 32768.0f);

  for (int i = 0; i < 2000; ++i) {
    scaler_update(scaler, false);
  }
  CHECK(scaler.scale == 65536.0f);  // doubled exactly once
  CHECK(scaler.consecutive_good == 0);
}

TEST_CASE("scaler round trip is exact for powers of two") {
  LossScaler scaler;
  scaler.scale = 65536.0f;
  const ParamVector g = vec({1e-4f, -3.7f, 42.0f});
  std::vector<float> scaled(g.size());
  for (size_t i = 0; i < scaled.size(); ++i) {
    scaled[i] = g[i] * scaler.scale;
  }
  const UnscaleResult back = scaler_unscale_and_check(scaler, vec(scaled));
  CHECK_FALSE(back.overflow);
  CHECK(back.grad == g);
}

TEST_CASE("scaler never reaches zero") {
  LossScaler scaler;
  scaler.scale = 1.0f;
  for (int i = 0; i < 200; ++i) {
    scaler_update(scaler, true);
    CHECK(scaler.scale > 0.0f);
    // Power of two: exactly one bit set in the significand grid.
    const float log2v = std::log2(scaler.scale);
    CHECK(log2v == std::floor(log2v));
  }
}
