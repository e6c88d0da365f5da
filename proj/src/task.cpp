// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/task.hpp"

#include <cmath>
#include <utility>

#include "diloco/rng.hpp"

namespace diloco {

namespace {

constexpr const char* kPurposeTrain = "data";
constexpr const char* kPurposeEval = "eval";
constexpr const char* kPurposeInit = "init";
constexpr const char* kPurposeTeacher = "teacher";
constexpr const char* kPurposeMarkov = "markov";

void validate(const TaskSpec& spec) {
  auto require = [](bool ok, const char* what) {
    if (!ok) {
      throw ConfigError(std::string("invalid task spec: ") + what);
    }
  };
  require(spec.input_dim > 0, "input_dim must be positive");
  require(spec.output_dim > 0, "output_dim must be positive");
  require(spec.dataset_size > 0, "dataset_size must be positive");
  switch (spec.kind) {
    case TaskKind::linear_regression:
      break;
    case TaskKind::mlp_classifier:
      require(spec.depth >= 1, "depth must be >= 1");
      require(spec.depth == 1 || spec.hidden_dim > 0,
              "hidden_dim must be positive when depth > 1");
      require(spec.output_dim >= 2, "classifier needs >= 2 classes");
      break;
    case TaskKind::char_lm:
      require(spec.output_dim >= 2, "char_lm vocabulary must be >= 2");
      require(spec.hidden_dim > 0, "char_lm embedding width must be positive");
      break;
  }
}

// Weight-matrix shapes per layer: {fan_in, fan_out}.
std::vector<std::pair<size_t, size_t>> mlp_shapes(const TaskSpec& spec) {
  std::vector<std::pair<size_t, size_t>> shapes;
  if (spec.depth == 1) {
    shapes.emplace_back(spec.input_dim, spec.output_dim);
    return shapes;
  }
  shapes.emplace_back(spec.input_dim, spec.hidden_dim);
  for (size_t l = 2; l < spec.depth; ++l) {
    shapes.emplace_back(spec.hidden_dim, spec.hidden_dim);
  }
  shapes.emplace_back(spec.hidden_dim, spec.output_dim);
  return shapes;
}

LayoutPtr task_layout(const TaskSpec& spec) {
  std::vector<Segment> segments;
  size_t offset = 0;
  auto add = [&](const std::string& name, size_t length) {
    segments.push_back(Segment{name, offset, length});
    offset += length;
  };
  switch (spec.kind) {
    case TaskKind::linear_regression:
      add("w", spec.input_dim * spec.output_dim);
      add("b", spec.output_dim);
      break;
    case TaskKind::mlp_classifier: {
      size_t l = 0;
      for (auto [fan_in, fan_out] : mlp_shapes(spec)) {
        add("w" + std::to_string(l), fan_in * fan_out);
        add("b" + std::to_string(l), fan_out);
        ++l;
      }
      break;
    }
    case TaskKind::char_lm:
      add("embed", spec.output_dim * spec.hidden_dim);
      add("out_w", spec.hidden_dim * spec.output_dim);
      add("out_b", spec.output_dim);
      break;
  }
  return Layout::make(std::move(segments));
}

// Uniform +/- 1/sqrt(fan_in) weights, zero biases.
void fill_layer(std::vector<float>& data, const Segment& weights,
                size_t fan_in, uint64_t seed, uint64_t layer_index,
                const char* purpose) {
  CounterRng rng(seed, purpose, layer_index);
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (size_t i = 0; i < weights.length; ++i) {
    data[weights.offset + i] = rng.next_uniform(-bound, bound);
  }
}

// Teacher parameters for label/target generation. Drawn wider than the
// student init so labels are not near-degenerate.
std::vector<float> teacher_params(const TaskSpec& spec, const Layout& layout) {
  std::vector<float> data(layout.total_length(), 0.0f);
  uint64_t layer = 0;
  for (const Segment& seg : layout.segments()) {
    if (seg.name[0] != 'w') {
      continue;
    }
    CounterRng rng(spec.seed, kPurposeTeacher, layer++);
    for (size_t i = 0; i < seg.length; ++i) {
      data[seg.offset + i] = rng.next_uniform(-1.5f, 1.5f);
    }
  }
  // Teacher biases stay zero.
  return data;
}

// Row-stochastic Markov transition matrix; uniform draws raised to the
// fourth power so rows are peaked and the chain is learnable.
std::vector<double> markov_matrix(const TaskSpec& spec) {
  const size_t vocab = spec.output_dim;
  std::vector<double> rows(vocab * vocab);
  for (size_t r = 0; r < vocab; ++r) {
    CounterRng rng(spec.seed, kPurposeMarkov, r);
    double total = 0.0;
    for (size_t c = 0; c < vocab; ++c) {
      const double u = static_cast<double>(rng.next_uniform()) + 1e-4;
      const double v = u * u * u * u;
      rows[r * vocab + c] = v;
      total += v;
    }
    for (size_t c = 0; c < vocab; ++c) {
      rows[r * vocab + c] /= total;
    }
  }
  return rows;
}

size_t sample_categorical(const std::vector<double>& rows, size_t row,
                          size_t vocab, float u) {
  double cumulative = 0.0;
  for (size_t c = 0; c < vocab; ++c) {
    cumulative += rows[row * vocab + c];
    if (u < cumulative) {
      return c;
    }
  }
  return vocab - 1;
}

// MLP forward into per-layer activations. `activations[l]` is the input of
// layer l; the returned vector is the final logits.
std::vector<double> mlp_forward(const TaskSpec& spec,
                                std::span<const float> params,
                                const Layout& layout,
                                std::span<const double> input,
                                std::vector<std::vector<double>>* activations) {
  const auto shapes = mlp_shapes(spec);
  std::vector<double> current(input.begin(), input.end());
  for (size_t l = 0; l < shapes.size(); ++l) {
    if (activations) {
      (*activations)[l] = current;
    }
    const auto [fan_in, fan_out] = shapes[l];
    const Segment& w = layout.segment("w" + std::to_string(l));
    const Segment& b = layout.segment("b" + std::to_string(l));
    std::vector<double> next(fan_out);
    for (size_t o = 0; o < fan_out; ++o) {
      double acc = params[b.offset + o];
      for (size_t i = 0; i < fan_in; ++i) {
        acc += static_cast<double>(params[w.offset + o * fan_in + i]) *
               current[i];
      }
      next[o] = acc;
    }
    if (l + 1 < shapes.size()) {
      for (double& v : next) {
        v = std::tanh(v);
      }
    }
    current = std::move(next);
  }
  return current;
}

// log(sum(exp(z))) and softmax probabilities, max-shifted.
double log_sum_exp(const std::vector<double>& logits,
                   std::vector<double>* probs) {
  double zmax = logits[0];
  for (double z : logits) {
    zmax = std::max(zmax, z);
  }
  double total = 0.0;
  for (double z : logits) {
    total += std::exp(z - zmax);
  }
  const double lse = zmax + std::log(total);
  if (probs) {
    probs->resize(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
      (*probs)[i] = std::exp(logits[i] - lse);
    }
  }
  return lse;
}

Batch build_batch(const TaskSpec& spec, const char* purpose,
                  uint64_t first_sample, size_t count,
                  const ShardDesc* shard_desc, uint64_t cursor) {
  validate(spec);
  Batch batch;
  batch.batch_size = count;
  batch.index_start = cursor;
  batch.index_end = cursor + count;

  const LayoutPtr layout = task_layout(spec);
  std::vector<float> teacher;
  std::vector<double> markov;
  if (spec.kind == TaskKind::char_lm) {
    markov = markov_matrix(spec);
  } else {
    teacher = teacher_params(spec, *layout);
  }

  for (size_t s = 0; s < count; ++s) {
    const uint64_t sample_index =
        shard_desc ? shard_desc->global_index(cursor + s) : first_sample + s;
    CounterRng rng(spec.seed, purpose, sample_index);
    switch (spec.kind) {
      case TaskKind::linear_regression: {
        std::vector<double> x(spec.input_dim);
        for (size_t i = 0; i < spec.input_dim; ++i) {
          const float xi = rng.next_uniform(-1.0f, 1.0f);
          batch.inputs.push_back(xi);
          x[i] = xi;
        }
        // Noiseless targets from the teacher's exact linear map.
        for (size_t o = 0; o < spec.output_dim; ++o) {
          double acc = 0.0;
          for (size_t i = 0; i < spec.input_dim; ++i) {
            acc += static_cast<double>(teacher[o * spec.input_dim + i]) * x[i];
          }
          batch.float_targets.push_back(static_cast<float>(acc));
        }
        break;
      }
      case TaskKind::mlp_classifier: {
        std::vector<double> x(spec.input_dim);
        for (size_t i = 0; i < spec.input_dim; ++i) {
          const float xi = rng.next_uniform(-1.0f, 1.0f);
          batch.inputs.push_back(xi);
          x[i] = xi;
        }
        const std::vector<double> logits =
            mlp_forward(spec, teacher, *layout, x, nullptr);
        size_t label = 0;
        for (size_t c = 1; c < logits.size(); ++c) {
          if (logits[c] > logits[label]) {
            label = c;
          }
        }
        batch.label_targets.push_back(static_cast<uint32_t>(label));
        break;
      }
      case TaskKind::char_lm: {
        const size_t vocab = spec.output_dim;
        size_t current = static_cast<size_t>(rng.next_below(vocab));
        for (size_t t = 0; t < spec.input_dim; ++t) {
          batch.token_inputs.push_back(static_cast<uint32_t>(current));
          current = sample_categorical(markov, current, vocab,
                                       rng.next_uniform());
        }
        batch.label_targets.push_back(static_cast<uint32_t>(current));
        break;
      }
    }
  }
  return batch;
}

struct Accumulator {
  double loss = 0.0;
  std::vector<double> grad;
};

Accumulator evaluate(const TaskSpec& spec, const ParamVector& params,
                     const Batch& batch, bool want_grad) {
  if (!params.all_finite()) {
    throw NumericError("loss_and_grad: non-finite parameters");
  }
  const Layout& layout = *params.layout();
  std::span<const float> p = params.values();
  Accumulator acc;
  if (want_grad) {
    acc.grad.assign(params.size(), 0.0);
  }
  const size_t batch_size = batch.batch_size;
  const double inv_batch = 1.0 / static_cast<double>(batch_size);

  switch (spec.kind) {
    case TaskKind::linear_regression: {
      const Segment& w = layout.segment("w");
      const Segment& b = layout.segment("b");
      for (size_t s = 0; s < batch_size; ++s) {
        const float* x = batch.inputs.data() + s * spec.input_dim;
        const float* t = batch.float_targets.data() + s * spec.output_dim;
        for (size_t o = 0; o < spec.output_dim; ++o) {
          double pred = p[b.offset + o];
          for (size_t i = 0; i < spec.input_dim; ++i) {
            pred += static_cast<double>(p[w.offset + o * spec.input_dim + i]) *
                    static_cast<double>(x[i]);
          }
          const double err = pred - static_cast<double>(t[o]);
          acc.loss += 0.5 * err * err * inv_batch;
          if (want_grad) {
            const double g = err * inv_batch;
            for (size_t i = 0; i < spec.input_dim; ++i) {
              acc.grad[w.offset + o * spec.input_dim + i] +=
                  g * static_cast<double>(x[i]);
            }
            acc.grad[b.offset + o] += g;
          }
        }
      }
      break;
    }
    case TaskKind::mlp_classifier: {
      const auto shapes = mlp_shapes(spec);
      std::vector<std::vector<double>> activations(shapes.size());
      for (size_t s = 0; s < batch_size; ++s) {
        std::vector<double> x(spec.input_dim);
        for (size_t i = 0; i < spec.input_dim; ++i) {
          x[i] = static_cast<double>(batch.inputs[s * spec.input_dim + i]);
        }
        const std::vector<double> logits =
            mlp_forward(spec, p, layout, x, &activations);
        std::vector<double> probs;
        const double lse = log_sum_exp(logits, &probs);
        const size_t target = batch.label_targets[s];
        acc.loss += (lse - logits[target]) * inv_batch;
        if (!want_grad) {
          continue;
        }
        // Backward: delta starts as softmax - onehot.
        std::vector<double> delta = probs;
        delta[target] -= 1.0;
        for (double& d : delta) {
          d *= inv_batch;
        }
        for (size_t l = shapes.size(); l-- > 0;) {
          const auto [fan_in, fan_out] = shapes[l];
          const Segment& w = layout.segment("w" + std::to_string(l));
          const Segment& b = layout.segment("b" + std::to_string(l));
          const std::vector<double>& input = activations[l];
          std::vector<double> prev_delta(fan_in, 0.0);
          for (size_t o = 0; o < fan_out; ++o) {
            acc.grad[b.offset + o] += delta[o];
            for (size_t i = 0; i < fan_in; ++i) {
              acc.grad[w.offset + o * fan_in + i] += delta[o] * input[i];
              prev_delta[i] +=
                  static_cast<double>(p[w.offset + o * fan_in + i]) * delta[o];
            }
          }
          if (l > 0) {
            // Input of layer l is tanh(z_{l-1}): tanh' = 1 - tanh^2.
            for (size_t i = 0; i < fan_in; ++i) {
              prev_delta[i] *= 1.0 - input[i] * input[i];
            }
            delta = std::move(prev_delta);
          }
        }
      }
      break;
    }
    case TaskKind::char_lm: {
      const size_t vocab = spec.output_dim;
      const size_t width = spec.hidden_dim;
      const size_t context = spec.input_dim;
      const Segment& embed = layout.segment("embed");
      const Segment& out_w = layout.segment("out_w");
      const Segment& out_b = layout.segment("out_b");
      const double inv_context = 1.0 / static_cast<double>(context);
      std::vector<double> pooled(width);
      for (size_t s = 0; s < batch_size; ++s) {
        const uint32_t* tokens = batch.token_inputs.data() + s * context;
        for (size_t d = 0; d < width; ++d) {
          double sum = 0.0;
          for (size_t t = 0; t < context; ++t) {
            sum += static_cast<double>(p[embed.offset + tokens[t] * width + d]);
          }
          pooled[d] = sum * inv_context;
        }
        std::vector<double> logits(vocab);
        for (size_t v = 0; v < vocab; ++v) {
          double z = p[out_b.offset + v];
          for (size_t d = 0; d < width; ++d) {
            z += static_cast<double>(p[out_w.offset + d * vocab + v]) *
                 pooled[d];
          }
          logits[v] = z;
        }
        std::vector<double> probs;
        const double lse = log_sum_exp(logits, &probs);
        const size_t target = batch.label_targets[s];
        acc.loss += (lse - logits[target]) * inv_batch;
        if (!want_grad) {
          continue;
        }
        std::vector<double> delta = probs;
        delta[target] -= 1.0;
        for (size_t v = 0; v < vocab; ++v) {
          const double dv = delta[v] * inv_batch;
          acc.grad[out_b.offset + v] += dv;
          for (size_t d = 0; d < width; ++d) {
            acc.grad[out_w.offset + d * vocab + v] += dv * pooled[d];
          }
        }
        for (size_t d = 0; d < width; ++d) {
          double de = 0.0;
          for (size_t v = 0; v < vocab; ++v) {
            de += static_cast<double>(p[out_w.offset + d * vocab + v]) *
                  delta[v] * inv_batch;
          }
          de *= inv_context;
          for (size_t t = 0; t < context; ++t) {
            acc.grad[embed.offset + tokens[t] * width + d] += de;
          }
        }
      }
      break;
    }
  }
  if (!std::isfinite(acc.loss)) {
    throw NumericError("loss_and_grad: non-finite loss");
  }
  return acc;
}

}  // namespace

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "linear_regression") return TaskKind::linear_regression;
  if (name == "mlp_classifier") return TaskKind::mlp_classifier;
  if (name == "char_lm") return TaskKind::char_lm;
  throw ConfigError("unknown task kind '" + name + "'");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::linear_regression: return "linear_regression";
    case TaskKind::mlp_classifier: return "mlp_classifier";
    case TaskKind::char_lm: return "char_lm";
  }
  return "unknown";
}

size_t ShardDesc::size() const {
  if (worker_index >= dataset_size) {
    return 0;
  }
  return (dataset_size - worker_index + num_workers - 1) / num_workers;
}

uint64_t ShardDesc::global_index(uint64_t position) const {
  const size_t n = size();
  return worker_index + (position % n) * num_workers;
}

ParamVector init_params(const TaskSpec& spec) {
  validate(spec);
  const LayoutPtr layout = task_layout(spec);
  std::vector<float> data(layout->total_length(), 0.0f);
  uint64_t layer = 0;
  for (const Segment& seg : layout->segments()) {
    size_t fan_in = 0;
    if (spec.kind == TaskKind::char_lm) {
      if (seg.name == "embed") {
        fan_in = spec.output_dim;
      } else if (seg.name == "out_w") {
        fan_in = spec.hidden_dim;
      }
    } else if (seg.name[0] == 'w') {
      fan_in = seg.length / (spec.kind == TaskKind::linear_regression
                                 ? spec.output_dim
                                 : 1);
      if (spec.kind == TaskKind::mlp_classifier) {
        fan_in = mlp_shapes(spec)[layer].first;
      }
    }
    if (fan_in > 0) {
      fill_layer(data, seg, fan_in, spec.seed, layer++, kPurposeInit);
    }
  }
  return ParamVector(layout, std::move(data));
}

ShardDesc shard(const TaskSpec& spec, size_t worker_index,
                size_t num_workers) {
  validate(spec);
  if (num_workers == 0) {
    throw ConfigError("shard: num_workers must be positive");
  }
  if (worker_index >= num_workers) {
    throw ConfigError("shard: worker_index " + std::to_string(worker_index) +
                      " out of range for " + std::to_string(num_workers) +
                      " workers");
  }
  return ShardDesc{worker_index, num_workers, spec.dataset_size};
}

Batch make_batch(const TaskSpec& spec, const ShardDesc& shard_desc,
                 uint64_t cursor, size_t batch_size) {
  if (shard_desc.size() == 0) {
    throw ConfigError("make_batch: empty shard");
  }
  return build_batch(spec, kPurposeTrain, 0, batch_size, &shard_desc, cursor);
}

Batch make_eval_batch(const TaskSpec& spec, uint64_t start, size_t count) {
  return build_batch(spec, kPurposeEval, start, count, nullptr, start);
}

double loss_only(const TaskSpec& spec, const ParamVector& params,
                 const Batch& batch) {
  return evaluate(spec, params, batch, false).loss;
}

LossGrad loss_and_grad(const TaskSpec& spec, const ParamVector& params,
                       const Batch& batch) {
  Accumulator acc = evaluate(spec, params, batch, true);
  std::vector<float> grad(params.size());
  for (size_t i = 0; i < grad.size(); ++i) {
    grad[i] = static_cast<float>(acc.grad[i]);
    if (!std::isfinite(grad[i])) {
      throw NumericError("loss_and_grad: non-finite gradient");
    }
  }
  return LossGrad{static_cast<float>(acc.loss),
                  ParamVector(params.layout(), std::move(grad))};
}

float perplexity(float loss) {
  return std::exp(loss);
}

double uniform_loss(size_t vocab) {
  return std::log(static_cast<double>(vocab));
}

}  // namespace diloco
