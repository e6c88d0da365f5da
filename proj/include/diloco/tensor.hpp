// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat FP32 parameter vectors with named-segment layouts, plus the FP16
// buffer used for reduced-precision all-reduce. ParamVector is the single
// currency of all math in this library: parameters, gradients, optimizer
// moments and pseudo-gradients are all ParamVectors sharing one layout.

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diloco/errors.hpp"

namespace diloco {

/// One named, contiguous slice of a flat parameter vector.
struct Segment {
  std::string name;
  size_t offset = 0;
  size_t length = 0;

  bool operator==(const Segment&) const = default;
};

/// Ordered, contiguous, non-overlapping segment table. Immutable.
class Layout {
 public:
  /// Validates that segments are ordered by offset, contiguous from zero
  /// and non-overlapping. Throws ShapeError otherwise.
  static std::shared_ptr<const Layout> make(std::vector<Segment> segments);

  /// Convenience: a single unnamed-ish segment covering `length` scalars.
  static std::shared_ptr<const Layout> single(const std::string& name,
                                              size_t length);

  const std::vector<Segment>& segments() const { return segments_; }
  size_t total_length() const { return total_; }

  /// Segment lookup by name; throws ShapeError if absent.
  const Segment& segment(const std::string& name) const;

  bool operator==(const Layout& other) const {
    return segments_ == other.segments_;
  }

 private:
  explicit Layout(std::vector<Segment> segments);

  std::vector<Segment> segments_;
  size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

/// Flat FP32 vector bound to a layout. Treat as immutable once shared:
/// optimizer code mutates a vector it exclusively owns, everything else
/// builds new values. Equality is bitwise on data AND layout equality,
/// so vectors from different models never compare equal.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(LayoutPtr layout, std::vector<float> data);

  static ParamVector zeros(LayoutPtr layout);

  const LayoutPtr& layout() const { return layout_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> values() const { return data_; }
  float operator[](size_t i) const { return data_[i]; }

  /// Mutable access for the single-owner update path.
  std::span<float> mutable_values() { return data_; }

  /// View of one named segment.
  std::span<const float> segment_values(const std::string& name) const;

  bool same_layout(const ParamVector& other) const;
  bool all_finite() const;

  bool operator==(const ParamVector& other) const;
  bool operator!=(const ParamVector& other) const { return !(*this == other); }

 private:
  LayoutPtr layout_;
  std::vector<float> data_;
};

/// Packed binary16 codes produced from a ParamVector. `overflow` is set
/// when encoding mapped a finite value to +/-infinity (or saw a
/// non-finite input); it is a signal, never a failure.
struct Fp16Buffer {
  std::vector<uint16_t> bits;
  bool overflow = false;

  size_t size() const { return bits.size(); }
};

/// y + alpha * x, elementwise. Inputs are unmodified.
/// Throws ShapeError when layouts differ.
ParamVector axpy(float alpha, const ParamVector& x, const ParamVector& y);

/// Encode every scalar to binary16 (round-to-nearest-even).
Fp16Buffer encode_fp16(const ParamVector& v);

/// Exact widening of binary16 codes back to FP32 under `layout`.
/// Throws ShapeError when lengths disagree.
ParamVector decode_fp16(const Fp16Buffer& buffer, LayoutPtr layout);

// --- Binary serialization -------------------------------------------------
//
// Wire/checkpoint format (all integers little-endian u64 unless noted):
//   segment_count | per segment: name_length, name bytes, offset, length
//   | scalar payload (FP32 bits LE for ParamVector, u16 codes LE for
//   Fp16Buffer).

void serialize_layout(const Layout& layout, std::vector<uint8_t>& out);
LayoutPtr deserialize_layout(std::span<const uint8_t> in, size_t& cursor);

std::vector<uint8_t> serialize_param_vector(const ParamVector& v);
ParamVector deserialize_param_vector(std::span<const uint8_t> in);

std::vector<uint8_t> serialize_fp16_payload(const Fp16Buffer& buffer,
                                            const Layout& layout);
Fp16Buffer deserialize_fp16_payload(std::span<const uint8_t> in,
                                    LayoutPtr& layout_out);

}  // namespace diloco
