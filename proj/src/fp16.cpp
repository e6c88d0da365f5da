// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/fp16.hpp"

#include <bit>

namespace diloco {

namespace {

// Right shift with round-to-nearest, ties to even. shift in [1, 31].
inline uint32_t shift_rne(uint32_t m, int shift) {
  uint32_t q = m >> shift;
  uint32_t rem = m & ((1u << shift) - 1u);
  uint32_t half = 1u << (shift - 1);
  if (rem > half || (rem == half && (q & 1u))) {
    ++q;
  }
  return q;
}

}  // namespace

uint16_t fp16_encode(float value) {
  const uint32_t x = std::bit_cast<uint32_t>(value);
  const uint16_t sign = static_cast<uint16_t>((x >> 16) & 0x8000u);
  const uint32_t mag = x & 0x7FFFFFFFu;

  if (mag >= 0x7F800000u) {
    if (mag == 0x7F800000u) {
      return sign | 0x7C00u;  // infinity
    }
    return sign | 0x7E00u;  // canonical quiet NaN
  }
  // >= 65520 rounds past the largest finite half (65504) to infinity.
  if (mag >= 0x477FF000u) {
    return sign | 0x7C00u;
  }
  // <= 2^-25: below or at the midpoint under the smallest subnormal;
  // the tie at exactly 2^-25 rounds to the even candidate, zero.
  if (mag <= 0x33000000u) {
    return sign;
  }
  // Subnormal half range, |v| < 2^-14. Result is round(|v| * 2^24).
  if (mag < 0x38800000u) {
    const uint32_t significand = (mag & 0x007FFFFFu) | 0x00800000u;
    const int exp = static_cast<int>(mag >> 23);  // biased FP32 exponent
    // |v| * 2^24 = significand * 2^(exp - 126)
    const uint32_t q = shift_rne(significand, 126 - exp);
    // q == 1024 overflows into the smallest normal; the bit layout makes
    // that carry automatic.
    return sign | static_cast<uint16_t>(q);
  }
  // Normal range.
  const uint32_t exp16 = (mag >> 23) - 127 + 15;
  uint32_t code = (exp16 << 10) | ((mag & 0x007FFFFFu) >> 13);
  const uint32_t rem = mag & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (code & 1u))) {
    ++code;  // may carry into the exponent; cannot reach infinity here
  }
  return sign | static_cast<uint16_t>(code);
}

float fp16_decode(uint16_t bits) {
  const uint32_t sign = static_cast<uint32_t>(bits & 0x8000u) << 16;
  const uint32_t exp = (bits >> 10) & 0x1Fu;
  const uint32_t mant = bits & 0x3FFu;

  if (exp == 0) {
    if (mant == 0) {
      return std::bit_cast<float>(sign);  // signed zero
    }
    // Subnormal: mant * 2^-24, exact as an FP32 product.
    const float magnitude = static_cast<float>(mant) * 0x1p-24f;
    return std::bit_cast<float>(sign | std::bit_cast<uint32_t>(magnitude));
  }
  if (exp == 31) {
    if (mant == 0) {
      return std::bit_cast<float>(sign | 0x7F800000u);
    }
    return std::bit_cast<float>(sign | 0x7FC00000u | (mant << 13));
  }
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

}  // namespace diloco
