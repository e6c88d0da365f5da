// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "diloco/rng.hpp"
#include "diloco/task.hpp"

using namespace diloco;

namespace {

TaskSpec linreg_spec() {
  TaskSpec spec;
  spec.kind = TaskKind::linear_regression;
  spec.input_dim = 2;
  spec.output_dim = 1;
  spec.seed = 11;
  spec.dataset_size = 64;
  return spec;
}

TaskSpec mlp_spec() {
  TaskSpec spec;
  spec.kind = TaskKind::mlp_classifier;
  spec.input_dim = 3;
  spec.hidden_dim = 4;
  spec.output_dim = 2;
  spec.depth = 2;
  spec.seed = 12;
  spec.dataset_size = 64;
  return spec;
}

TaskSpec charlm_spec() {
  TaskSpec spec;
  spec.kind = TaskKind::char_lm;
  spec.input_dim = 1;
  spec.hidden_dim = 8;
  spec.output_dim = 16;
  spec.seed = 13;
  spec.dataset_size = 4096;
  return spec;
}

// Central finite differences against the double-precision loss.
void gradient_check(const TaskSpec& spec) {
  const ParamVector params = init_params(spec);
  const ShardDesc sh = shard(spec, 0, 1);
  const Batch batch = make_batch(spec, sh, 0, 8);
  const LossGrad lg = loss_and_grad(spec, params, batch);

  CounterRng rng(321, "fd-coords", static_cast<uint64_t>(spec.kind));
  const double eps = 1e-3;
  for (int k = 0; k < 20; ++k) {
    const size_t i = rng.next_below(params.size());
    std::vector<float> bumped(params.values().begin(), params.values().end());
    const float original = bumped[i];
    bumped[i] = original + static_cast<float>(eps);
    const double up = loss_only(
        spec, ParamVector(params.layout(), bumped), batch);
    bumped[i] = original - static_cast<float>(eps);
    const double down = loss_only(
        spec, ParamVector(params.layout(), bumped), batch);
    const double fd = (up - down) / (2.0 * eps);
    const double analytic = lg.grad[i];
    const double scale =
        std::max({std::fabs(fd), std::fabs(analytic), 1e-4});
    CAPTURE(i);
    CHECK(std::fabs(fd - analytic) / scale <= 1e-4);
  }
}

}  // namespace

TEST_CASE("init layouts and parameter counts") {
  const ParamVector lin = init_params(linreg_spec());
  REQUIRE(lin.layout()->segments().size() == 2);
  CHECK(lin.layout()->segments()[0].name == "w");
  CHECK(lin.layout()->segments()[0].length == 2);
  CHECK(lin.layout()->segments()[1].name == "b");
  CHECK(lin.layout()->segments()[1].length == 1);
  CHECK(lin.size() == 3);

  // depth=2, hidden=4, in=3, out=2: 3*4+4 + 4*2+2 = 26.
  CHECK(init_params(mlp_spec()).size() == 26);

  const TaskSpec lm = charlm_spec();
  CHECK(init_params(lm).size() ==
        lm.output_dim * lm.hidden_dim + lm.hidden_dim * lm.output_dim +
            lm.output_dim);
}

TEST_CASE("init is deterministic") {
  CHECK(init_params(linreg_spec()) == init_params(linreg_spec()));
  CHECK(init_params(charlm_spec()) == init_params(charlm_spec()));
  TaskSpec other = charlm_spec();
  other.seed += 1;
  CHECK(init_params(other) != init_params(charlm_spec()));
}

TEST_CASE("init rejects zero-sized layers") {
  TaskSpec bad = mlp_spec();
  bad.hidden_dim = 0;
  CHECK_THROWS_AS(init_params(bad), ConfigError);
  TaskSpec bad2 = linreg_spec();
  bad2.input_dim = 0;
  CHECK_THROWS_AS(init_params(bad2), ConfigError);
}

TEST_CASE("shard examples") {
  TaskSpec spec = linreg_spec();
  spec.dataset_size = 10;
  const ShardDesc s0 = shard(spec, 0, 2);
  CHECK(s0.size() == 5);
  for (uint64_t p = 0; p < 5; ++p) {
    CHECK(s0.global_index(p) == 2 * p);
  }
  const ShardDesc full = shard(spec, 0, 1);
  CHECK(full.size() == 10);
  CHECK_THROWS_AS(shard(spec, 0, 0), ConfigError);
  CHECK_THROWS_AS(shard(spec, 2, 2), ConfigError);
}

TEST_CASE("shards partition the dataset") {
  TaskSpec spec = linreg_spec();
  for (size_t k : {1, 2, 3, 4, 7}) {
    for (size_t n : {1, 5, 24, 37}) {
      spec.dataset_size = n;
      std::set<uint64_t> seen;
      size_t total = 0;
      for (size_t w = 0; w < k; ++w) {
        const ShardDesc sh = shard(spec, w, k);
        total += sh.size();
        for (uint64_t p = 0; p < sh.size(); ++p) {
          const uint64_t g = sh.global_index(p);
          CHECK(g < n);
          CHECK(g % k == w);
          seen.insert(g);
        }
      }
      CHECK(total == n);
      CHECK(seen.size() == n);
    }
  }
}

TEST_CASE("batches wrap around the shard") {
  TaskSpec spec = charlm_spec();
  spec.dataset_size = 8;
  const ShardDesc sh = shard(spec, 1, 2);  // indices {1,3,5,7}
  const Batch a = make_batch(spec, sh, 0, 4);
  const Batch b = make_batch(spec, sh, 4, 4);  // wraps to the same samples
  CHECK(a.token_inputs == b.token_inputs);
  CHECK(a.label_targets == b.label_targets);
  CHECK(a.index_start == 0);
  CHECK(b.index_start == 4);
}

TEST_CASE("linear regression at the generating parameters has zero loss") {
  // Recover the teacher by construction: targets are exact, so the
  // optimum is loss 0 with vanishing gradient. Probe it via descent on a
  // tiny problem instead of reaching into the generator: here we simply
  // check a random batch has positive loss at init and that zero loss is
  // achieved on the teacher itself, which make_batch exposes through the
  // targets of a one-dimensional identity problem.
  TaskSpec spec;
  spec.kind = TaskKind::linear_regression;
  spec.input_dim = 1;
  spec.output_dim = 1;
  spec.seed = 5;
  spec.dataset_size = 32;
  const ShardDesc sh = shard(spec, 0, 1);
  const Batch batch = make_batch(spec, sh, 0, 16);
  // Solve for the 1-d teacher weight from two samples: t = w*x exactly.
  const double w_true = static_cast<double>(batch.float_targets[0]) /
                        static_cast<double>(batch.inputs[0]);
  const double w_check = static_cast<double>(batch.float_targets[1]) /
                         static_cast<double>(batch.inputs[1]);
  CHECK(w_true == doctest::Approx(w_check).epsilon(1e-5));
  const ParamVector at_truth(init_params(spec).layout(),
                             {static_cast<float>(w_true), 0.0f});
  const LossGrad lg = loss_and_grad(spec, at_truth, batch);
  CHECK(lg.loss == doctest::Approx(0.0).epsilon(1e-9).scale(1.0));
  for (float g : lg.grad.values()) {
    CHECK(std::fabs(g) < 1e-4f);
  }
}

TEST_CASE("gradients match central finite differences") {
  gradient_check(linreg_spec());
  gradient_check(mlp_spec());
  gradient_check(charlm_spec());
}

TEST_CASE("loss and grad are deterministic") {
  const TaskSpec spec = mlp_spec();
  const ParamVector params = init_params(spec);
  const Batch batch = make_batch(spec, shard(spec, 0, 1), 0, 8);
  const LossGrad a = loss_and_grad(spec, params, batch);
  const LossGrad b = loss_and_grad(spec, params, batch);
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("char_lm initial loss is close to log vocabulary size") {
  const TaskSpec spec = charlm_spec();
  const ParamVector params = init_params(spec);
  const Batch batch = make_eval_batch(spec, 0, 512);
  const double loss = loss_only(spec, params, batch);
  CHECK(loss == doctest::Approx(uniform_loss(spec.output_dim)).epsilon(0.02));
}

TEST_CASE("non-finite parameters raise a numeric error") {
  const TaskSpec spec = linreg_spec();
  ParamVector params = init_params(spec);
  params.mutable_values()[0] = INFINITY;
  const Batch batch = make_batch(spec, shard(spec, 0, 1), 0, 4);
  CHECK_THROWS_AS(loss_and_grad(spec, params, batch), NumericError);
}

TEST_CASE("perplexity") {
  CHECK(perplexity(0.0f) == 1.0f);
  CHECK(perplexity(1.0f) == doctest::Approx(2.71828f).epsilon(1e-5));
  // Format check against a representative table value.
  CHECK(perplexity(std::log(16.17f)) == doctest::Approx(16.17f).epsilon(1e-5));
}
