// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar IEEE-754 binary16 conversion. Encoding rounds to nearest-even;
// values beyond the binary16 range become +/-infinity (no saturation).

#pragma once

#include <cstdint>

namespace diloco {

/// Convert one FP32 value to a binary16 bit pattern (round-to-nearest-even).
uint16_t fp16_encode(float value);

/// Widen one binary16 bit pattern to FP32. Exact for every input.
float fp16_decode(uint16_t bits);

/// True if the code is +/-inf or NaN.
inline bool fp16_is_nonfinite(uint16_t bits) {
  return (bits & 0x7C00u) == 0x7C00u;
}

}  // namespace diloco
