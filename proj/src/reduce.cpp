// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/reduce.hpp"

#include "diloco/fp16.hpp"

namespace diloco {

Precision precision_from_string(const std::string& name) {
  if (name == "fp32") return Precision::fp32;
  if (name == "fp16") return Precision::fp16;
  throw ConfigError("unknown reduce precision '" + name + "'");
}

std::string to_string(Precision precision) {
  return precision == Precision::fp16 ? "fp16" : "fp32";
}

std::vector<Range> partition_ranges(size_t n, size_t k) {
  std::vector<Range> ranges(k);
  const size_t base = k == 0 ? 0 : n / k;
  const size_t remainder = k == 0 ? 0 : n % k;
  size_t offset = 0;
  for (size_t i = 0; i < k; ++i) {
    const size_t length = base + (i < remainder ? 1 : 0);
    ranges[i] = Range{offset, length};
    offset += length;
  }
  return ranges;
}

void fold_mean(std::span<const std::span<const float>> slices,
               std::span<float> out) {
  const size_t count = slices.size();
  const float divisor = static_cast<float>(count);
  for (size_t i = 0; i < out.size(); ++i) {
    float acc = slices[0][i];
    for (size_t j = 1; j < count; ++j) {
      acc += slices[j][i];
    }
    out[i] = acc / divisor;
  }
}

ParamVector reduce_average(std::span<const ParamVector* const> contributions,
                           Precision precision) {
  if (contributions.empty()) {
    throw CollectiveError("reduce_average: no contributions");
  }
  const ParamVector& first = *contributions.front();
  for (const ParamVector* c : contributions) {
    if (!c->same_layout(first)) {
      throw ShapeError("reduce_average: contribution layout mismatch");
    }
  }
  const size_t n = first.size();

  if (precision == Precision::fp32) {
    std::vector<std::span<const float>> slices;
    slices.reserve(contributions.size());
    for (const ParamVector* c : contributions) {
      slices.push_back(c->values());
    }
    std::vector<float> out(n);
    fold_mean(slices, out);
    return ParamVector(first.layout(), std::move(out));
  }

  // FP16 path: one encode per contribution at the source, FP32 fold,
  // one encode of the mean at the owner.
  std::vector<std::vector<float>> decoded(contributions.size());
  std::vector<std::span<const float>> slices;
  slices.reserve(contributions.size());
  for (size_t j = 0; j < contributions.size(); ++j) {
    decoded[j].resize(n);
    std::span<const float> src = contributions[j]->values();
    for (size_t i = 0; i < n; ++i) {
      decoded[j][i] = fp16_decode(fp16_encode(src[i]));
    }
    slices.push_back(decoded[j]);
  }
  std::vector<float> mean(n);
  fold_mean(slices, mean);
  for (float& v : mean) {
    v = fp16_decode(fp16_encode(v));
  }
  return ParamVector(first.layout(), std::move(mean));
}

uint64_t per_peer_reduce_bytes(size_t elements, size_t k, size_t rank,
                               Precision precision) {
  if (k <= 1) {
    return 0;
  }
  const std::vector<Range> ranges = partition_ranges(elements, k);
  const uint64_t width = element_width(precision);
  // Scatter: every partition except our own goes straight to its owner.
  uint64_t sent = (elements - ranges[rank].length) * width;
  // Gather relay: K-1 ring steps, forwarding every partition except the
  // one that arrives last (our predecessor's successor slot).
  sent += (elements - ranges[(rank + 1) % k].length) * width;
  return sent;
}

uint64_t fleet_reduce_bytes(size_t elements, size_t k, Precision precision) {
  if (k <= 1) {
    return 0;
  }
  return 2 * static_cast<uint64_t>(k - 1) * payload_bytes(elements, precision);
}

PseudoGradient SoloCollective::all_reduce_avg(const PseudoGradient& local,
                                              ReduceReport* report) {
  const ParamVector* contribution = &local.delta;
  PseudoGradient result;
  result.delta = reduce_average(std::span(&contribution, 1), local.precision);
  result.precision = local.precision;
  result.outer_epoch = local.outer_epoch;
  if (report) {
    *report = ReduceReport{};
    report->outer_epoch = local.outer_epoch;
    report->contributors = 1;
  }
  return result;
}

}  // namespace diloco
