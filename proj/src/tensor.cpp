// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "diloco/fp16.hpp"

namespace diloco {

namespace {

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
}

uint64_t get_u64(std::span<const uint8_t> in, size_t& cursor) {
  if (cursor + 8 > in.size()) {
    throw SerializationError("truncated input: expected u64");
  }
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<uint64_t>(in[cursor + i]) << (8 * i);
  }
  cursor += 8;
  return v;
}

}  // namespace

Layout::Layout(std::vector<Segment> segments) : segments_(std::move(segments)) {
  size_t expected_offset = 0;
  for (const Segment& seg : segments_) {
    if (seg.offset != expected_offset) {
      throw ShapeError("layout segments must be contiguous and ordered; '" +
                       seg.name + "' starts at " + std::to_string(seg.offset) +
                       ", expected " + std::to_string(expected_offset));
    }
    expected_offset += seg.length;
  }
  total_ = expected_offset;
}

std::shared_ptr<const Layout> Layout::make(std::vector<Segment> segments) {
  return std::shared_ptr<const Layout>(new Layout(std::move(segments)));
}

std::shared_ptr<const Layout> Layout::single(const std::string& name,
                                             size_t length) {
  return make({Segment{name, 0, length}});
}

const Segment& Layout::segment(const std::string& name) const {
  for (const Segment& seg : segments_) {
    if (seg.name == name) {
      return seg;
    }
  }
  throw ShapeError("no segment named '" + name + "'");
}

ParamVector::ParamVector(LayoutPtr layout, std::vector<float> data)
    : layout_(std::move(layout)), data_(std::move(data)) {
  if (!layout_) {
    throw ShapeError("ParamVector requires a layout");
  }
  if (layout_->total_length() != data_.size()) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match layout length " +
                     std::to_string(layout_->total_length()));
  }
}

ParamVector ParamVector::zeros(LayoutPtr layout) {
  std::vector<float> data(layout->total_length(), 0.0f);
  return ParamVector(std::move(layout), std::move(data));
}

std::span<const float> ParamVector::segment_values(
    const std::string& name) const {
  const Segment& seg = layout_->segment(name);
  return std::span<const float>(data_).subspan(seg.offset, seg.length);
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_ == other.layout_) {
    return true;
  }
  return layout_ && other.layout_ && *layout_ == *other.layout_;
}

bool ParamVector::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

bool ParamVector::operator==(const ParamVector& other) const {
  if (!layout_ || !other.layout_) {
    return layout_ == other.layout_ && data_ == other.data_;
  }
  if (!(*layout_ == *other.layout_)) {
    return false;
  }
  // Bitwise comparison: distinguishes -0.0 from 0.0 and is NaN-stable.
  return std::memcmp(data_.data(), other.data_.data(),
                     data_.size() * sizeof(float)) == 0;
}

ParamVector axpy(float alpha, const ParamVector& x, const ParamVector& y) {
  if (!x.same_layout(y)) {
    throw ShapeError("axpy: layout mismatch");
  }
  std::vector<float> out(x.size());
  std::span<const float> xs = x.values();
  std::span<const float> ys = y.values();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = ys[i] + alpha * xs[i];
  }
  return ParamVector(x.layout(), std::move(out));
}

Fp16Buffer encode_fp16(const ParamVector& v) {
  Fp16Buffer out;
  out.bits.reserve(v.size());
  for (float value : v.values()) {
    const uint16_t code = fp16_encode(value);
    out.overflow |= fp16_is_nonfinite(code);
    out.bits.push_back(code);
  }
  return out;
}

ParamVector decode_fp16(const Fp16Buffer& buffer, LayoutPtr layout) {
  if (buffer.bits.size() != layout->total_length()) {
    throw ShapeError("decode_fp16: buffer length " +
                     std::to_string(buffer.bits.size()) +
                     " does not match layout length " +
                     std::to_string(layout->total_length()));
  }
  std::vector<float> data(buffer.bits.size());
  for (size_t i = 0; i < data.size(); ++i) {
    data[i] = fp16_decode(buffer.bits[i]);
  }
  return ParamVector(std::move(layout), std::move(data));
}

void serialize_layout(const Layout& layout, std::vector<uint8_t>& out) {
  put_u64(out, layout.segments().size());
  for (const Segment& seg : layout.segments()) {
    put_u64(out, seg.name.size());
    out.insert(out.end(), seg.name.begin(), seg.name.end());
    put_u64(out, seg.offset);
    put_u64(out, seg.length);
  }
}

LayoutPtr deserialize_layout(std::span<const uint8_t> in, size_t& cursor) {
  const uint64_t count = get_u64(in, cursor);
  if (count > in.size()) {  // cheap sanity bound before allocating
    throw SerializationError("implausible segment count");
  }
  std::vector<Segment> segments;
  segments.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    const uint64_t name_len = get_u64(in, cursor);
    if (cursor + name_len > in.size()) {
      throw SerializationError("truncated segment name");
    }
    std::string name(reinterpret_cast<const char*>(in.data() + cursor),
                     name_len);
    cursor += name_len;
    const uint64_t offset = get_u64(in, cursor);
    const uint64_t length = get_u64(in, cursor);
    segments.push_back(Segment{std::move(name), offset, length});
  }
  return Layout::make(std::move(segments));
}

std::vector<uint8_t> serialize_param_vector(const ParamVector& v) {
  std::vector<uint8_t> out;
  out.reserve(64 + v.size() * sizeof(float));
  serialize_layout(*v.layout(), out);
  for (float value : v.values()) {
    const uint32_t bits = std::bit_cast<uint32_t>(value);
    out.push_back(static_cast<uint8_t>(bits));
    out.push_back(static_cast<uint8_t>(bits >> 8));
    out.push_back(static_cast<uint8_t>(bits >> 16));
    out.push_back(static_cast<uint8_t>(bits >> 24));
  }
  return out;
}

ParamVector deserialize_param_vector(std::span<const uint8_t> in) {
  size_t cursor = 0;
  LayoutPtr layout = deserialize_layout(in, cursor);
  const size_t n = layout->total_length();
  if (cursor + n * 4 > in.size()) {
    throw SerializationError("truncated FP32 payload");
  }
  std::vector<float> data(n);
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<uint32_t>(in[cursor + 4 * i + b]) << (8 * b);
    }
    data[i] = std::bit_cast<float>(bits);
  }
  return ParamVector(std::move(layout), std::move(data));
}

std::vector<uint8_t> serialize_fp16_payload(const Fp16Buffer& buffer,
                                            const Layout& layout) {
  if (buffer.bits.size() != layout.total_length()) {
    throw ShapeError("fp16 payload length does not match layout");
  }
  std::vector<uint8_t> out;
  out.reserve(64 + buffer.bits.size() * 2);
  serialize_layout(layout, out);
  for (uint16_t code : buffer.bits) {
    out.push_back(static_cast<uint8_t>(code));
    out.push_back(static_cast<uint8_t>(code >> 8));
  }
  return out;
}

Fp16Buffer deserialize_fp16_payload(std::span<const uint8_t> in,
                                    LayoutPtr& layout_out) {
  size_t cursor = 0;
  layout_out = deserialize_layout(in, cursor);
  const size_t n = layout_out->total_length();
  if (cursor + n * 2 > in.size()) {
    throw SerializationError("truncated FP16 payload");
  }
  Fp16Buffer buffer;
  buffer.bits.resize(n);
  for (size_t i = 0; i < n; ++i) {
    buffer.bits[i] =
        static_cast<uint16_t>(static_cast<uint16_t>(in[cursor + 2 * i]) |
                              (static_cast<uint16_t>(in[cursor + 2 * i + 1])
                               << 8));
    buffer.overflow |= fp16_is_nonfinite(buffer.bits[i]);
  }
  return buffer;
}

}  // namespace diloco
