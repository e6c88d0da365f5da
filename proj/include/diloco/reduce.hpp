// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared reduction arithmetic. Every transport (sockets, virtual links,
// in-process) produces averages through the same kernel so results are
// bitwise identical across transports: contributions are folded in
// peer-sorted order in FP32 and divided by the contributor count. On the
// FP16 path each contribution is encoded exactly once at its source and
// the mean is encoded once by the partition owner.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "diloco/tensor.hpp"

namespace diloco {

enum class Precision : uint8_t { fp32 = 0, fp16 = 1 };

Precision precision_from_string(const std::string& name);
std::string to_string(Precision precision);

/// Negated parameter displacement over one local window, tagged with the
/// outer-step epoch it belongs to.
struct PseudoGradient {
  ParamVector delta;
  Precision precision = Precision::fp32;
  uint64_t outer_epoch = 0;
};

/// Per-round accounting from one peer's point of view. data bytes count
/// scalar payload only; wire bytes include framing and headers.
struct ReduceReport {
  uint64_t outer_epoch = 0;
  size_t contributors = 1;
  uint64_t data_bytes_sent = 0;
  uint64_t data_bytes_received = 0;
  uint64_t wire_bytes_sent = 0;
  uint64_t wire_bytes_received = 0;
  double wall_ms = 0.0;
  uint32_t attempts = 1;
};

struct Range {
  size_t offset = 0;
  size_t length = 0;
};

/// Balanced contiguous split of n elements into k ranges (first n%k ranges
/// one element longer). Ranges may be empty when k > n.
std::vector<Range> partition_ranges(size_t n, size_t k);

/// Elementwise mean over a slice: fold `slices` in index order in FP32,
/// divide by the slice count. The canonical arithmetic for every owner.
void fold_mean(std::span<const std::span<const float>> slices,
               std::span<float> out);

/// Full-vector average of K contributions, reproducing the wire path:
/// fp16 contributions go through one encode/decode at the source and the
/// mean through one encode/decode at the owner.
ParamVector reduce_average(std::span<const ParamVector* const> contributions,
                           Precision precision);

constexpr uint64_t element_width(Precision precision) {
  return precision == Precision::fp16 ? 2 : 4;
}

inline uint64_t payload_bytes(size_t elements, Precision precision) {
  return static_cast<uint64_t>(elements) * element_width(precision);
}

/// Scalar bytes rank `rank` sends in one round: direct scatter of every
/// foreign partition plus the ring relay of the all-gather.
uint64_t per_peer_reduce_bytes(size_t elements, size_t k, size_t rank,
                               Precision precision);

/// Scalar bytes the whole fleet sends per round: 2 * (K - 1) * payload.
uint64_t fleet_reduce_bytes(size_t elements, size_t k, Precision precision);

/// Collective surface the engine depends on. Implementations block the
/// calling training thread for the duration of the round.
class Collective {
 public:
  virtual ~Collective() = default;

  /// Number of peers currently eligible to contribute.
  virtual size_t world_size() const = 0;

  /// Average the local pseudo-gradient with every live contributor.
  /// Divisor is the survivor count of the round that completed.
  virtual PseudoGradient all_reduce_avg(const PseudoGradient& local,
                                        ReduceReport* report) = 0;
};

/// Collective for a single standalone worker: the average of one
/// contribution, moving zero bytes.
class SoloCollective final : public Collective {
 public:
  size_t world_size() const override { return 1; }
  PseudoGradient all_reduce_avg(const PseudoGradient& local,
                                ReduceReport* report) override;
};

}  // namespace diloco
