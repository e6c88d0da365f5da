// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-based deterministic random streams. Every consumer derives its
// own stream from (seed, purpose, index), so worker processes never share
// generator state and any sample can be regenerated in O(1).

#pragma once

#include <cstdint>
#include <string_view>

namespace diloco {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

/// Stateless-keyed stream: draws are splitmix64 walks from a key mixed out
/// of (seed, purpose, index). Identical keys give identical streams on any
/// platform; integer math only.
class CounterRng {
 public:
  CounterRng(uint64_t seed, std::string_view purpose, uint64_t index)
      : state_(mix(seed, detail::fnv1a64(purpose), index)) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return detail::splitmix64(state_);
  }

  /// Uniform in [0, 1) with 24 explicit bits, exact in FP32.
  float next_uniform() {
    return static_cast<float>(next_u64() >> 40) * 0x1p-24f;
  }

  /// Uniform in [lo, hi).
  float next_uniform(float lo, float hi) {
    return lo + (hi - lo) * next_uniform();
  }

  /// Uniform integer in [0, n). n must be > 0; uses 64-bit rejection-free
  /// multiply-shift, bias is negligible for the small n used here.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

 private:
  static uint64_t mix(uint64_t seed, uint64_t purpose, uint64_t index) {
    uint64_t h = detail::splitmix64(seed ^ 0x6A09E667F3BCC909ull);
    h = detail::splitmix64(h ^ purpose);
    h = detail::splitmix64(h ^ index);
    return h;
  }

  uint64_t state_;
};

}  // namespace diloco
