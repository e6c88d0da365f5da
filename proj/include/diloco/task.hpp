// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic learning tasks with closed-form forward/backward
// passes. Three kinds: least-squares regression against a fixed teacher,
// an MLP classifier on teacher-labelled points, and a next-character model
// over a seeded Markov source. All data is generated on demand from
// (seed, purpose, index) keys, so shards need no shared state.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diloco/tensor.hpp"

namespace diloco {

enum class TaskKind { linear_regression, mlp_classifier, char_lm };

TaskKind task_kind_from_string(const std::string& name);
std::string to_string(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::linear_regression;
  size_t input_dim = 1;   // context length for char_lm
  size_t hidden_dim = 1;  // embedding width for char_lm
  size_t output_dim = 1;  // vocabulary size for char_lm
  size_t depth = 1;       // number of weight matrices (mlp only)
  uint64_t seed = 0;
  size_t dataset_size = 1;
};

/// One worker's slice of the dataset: sample i belongs to worker
/// (i mod num_workers). Shards partition the index set.
struct ShardDesc {
  size_t worker_index = 0;
  size_t num_workers = 1;
  size_t dataset_size = 0;

  size_t size() const;
  /// Global dataset index of the shard-local position (with wraparound).
  uint64_t global_index(uint64_t position) const;
};

struct Batch {
  size_t batch_size = 0;
  // Populated per task kind; unused vectors stay empty.
  std::vector<float> inputs;           // batch x input_dim
  std::vector<uint32_t> token_inputs;  // batch x context (char_lm)
  std::vector<float> float_targets;    // batch x output_dim (regression)
  std::vector<uint32_t> label_targets; // batch (classifier / char_lm)
  uint64_t index_start = 0;  // shard-cursor range this batch was drawn from
  uint64_t index_end = 0;
};

struct LossGrad {
  float loss = 0.0f;
  ParamVector grad;
};

/// Deterministic per-layer scaled-uniform initialization; one layout
/// segment per weight/bias. Throws ConfigError on zero-sized layers.
ParamVector init_params(const TaskSpec& spec);

ShardDesc shard(const TaskSpec& spec, size_t worker_index, size_t num_workers);

/// Next `batch_size` samples starting at the worker's shard cursor,
/// sequential with wraparound.
Batch make_batch(const TaskSpec& spec, const ShardDesc& shard_desc,
                 uint64_t cursor, size_t batch_size);

/// Held-out samples from a stream disjoint from training data.
Batch make_eval_batch(const TaskSpec& spec, uint64_t start, size_t count);

/// Mean loss over the batch, accumulated in double precision.
double loss_only(const TaskSpec& spec, const ParamVector& params,
                 const Batch& batch);

/// Loss plus analytic gradient (same layout as params).
LossGrad loss_and_grad(const TaskSpec& spec, const ParamVector& params,
                       const Batch& batch);

float perplexity(float loss);

/// Entropy-style reference: expected initial loss of a near-uniform
/// predictor over the char_lm vocabulary.
double uniform_loss(size_t vocab);

}  // namespace diloco
