// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>

#include "diloco/fp16.hpp"
#include "diloco/rng.hpp"
#include "diloco/tensor.hpp"
#include "support/fp16_reference.hpp"

using namespace diloco;
using diloco::testing::ref_fp16_encode;
using diloco::testing::ref_fp16_value;

namespace {

ParamVector make_vec(const std::string& name, std::vector<float> data) {
  auto layout = Layout::single(name, data.size());
  return ParamVector(layout, std::move(data));
}

}  // namespace

TEST_CASE("fp16 scalar examples") {
  CHECK(fp16_encode(1.0f) == 0x3C00);
  CHECK(fp16_decode(fp16_encode(1.0f)) == 1.0f);
  // Spacing at magnitude 2048 is 2; the tie at 2049 goes to the even
  // mantissa, 2048.
  CHECK(fp16_decode(fp16_encode(2049.0f)) == 2048.0f);
  CHECK(fp16_encode(2049.0f) == ref_fp16_encode(2049.0f));
  CHECK(fp16_encode(0.0f) == 0x0000);
  CHECK(fp16_encode(-0.0f) == 0x8000);
  CHECK(fp16_decode(fp16_encode(1.5f)) == 1.5f);
  // Far below the subnormal range: flushes to zero.
  CHECK(fp16_decode(fp16_encode(1e-9f)) == 0.0f);
  CHECK(fp16_encode(1e-9f) == ref_fp16_encode(1e-9f));
}

TEST_CASE("fp16 overflow maps to infinity, not saturation") {
  CHECK(fp16_encode(65520.0f) == 0x7C00);
  CHECK(fp16_encode(-65520.0f) == 0xFC00);
  CHECK(fp16_encode(65519.0f) == 0x7BFF);  // still the max finite, 65504
  CHECK(fp16_decode(0x7BFF) == 65504.0f);
  CHECK(fp16_encode(1e30f) == 0x7C00);
  CHECK(std::isinf(fp16_decode(fp16_encode(INFINITY))));
  CHECK(std::isnan(fp16_decode(fp16_encode(NAN))));
}

TEST_CASE("fp16 decode matches format definition for every code") {
  for (uint32_t code = 0; code <= 0xFFFF; ++code) {
    const uint16_t c = static_cast<uint16_t>(code);
    const float got = fp16_decode(c);
    const uint16_t mag = c & 0x7FFF;
    const double want = ref_fp16_value(mag);
    if (std::isnan(want)) {
      CHECK(std::isnan(got));
      continue;
    }
    REQUIRE(static_cast<double>(std::fabs(got)) == want);
    CHECK(std::signbit(got) == ((c & 0x8000) != 0));
  }
}

TEST_CASE("fp16 round-trip is exact for every finite half value") {
  for (uint32_t code = 0; code <= 0xFFFF; ++code) {
    const uint16_t c = static_cast<uint16_t>(code);
    if ((c & 0x7C00) == 0x7C00) {
      continue;  // inf/NaN handled elsewhere
    }
    REQUIRE(fp16_encode(fp16_decode(c)) == c);
  }
}

TEST_CASE("fp16 encode matches bit-level reference on random floats") {
  CounterRng rng(2024, "fp16-fuzz", 0);
  for (int i = 0; i < 200000; ++i) {
    // Cover normals, subnormals and overflow by spreading the exponent.
    const float mant = rng.next_uniform(-2.0f, 2.0f);
    const int exp = static_cast<int>(rng.next_below(64)) - 32;
    const float value = std::ldexp(mant, exp);
    REQUIRE(fp16_encode(value) == ref_fp16_encode(value));
  }
}

TEST_CASE("fp16 relative round-trip error within half ULP up to 2048") {
  CounterRng rng(7, "fp16-relerr", 0);
  for (int i = 0; i < 100000; ++i) {
    const float value = rng.next_uniform(-2048.0f, 2048.0f);
    if (value == 0.0f || std::fabs(value) < 0x1p-14f) {
      continue;  // subnormal range has absolute, not relative, bounds
    }
    const float back = fp16_decode(fp16_encode(value));
    CHECK(std::fabs(back - value) <= std::ldexp(std::fabs(value), -11));
  }
}

TEST_CASE("layout validation") {
  CHECK_NOTHROW(Layout::make({{"w", 0, 4}, {"b", 4, 2}}));
  CHECK_THROWS_AS(Layout::make({{"w", 0, 4}, {"b", 5, 2}}), ShapeError);
  CHECK_THROWS_AS(Layout::make({{"b", 4, 2}, {"w", 0, 4}}), ShapeError);
  auto empty = Layout::make({});
  CHECK(empty->total_length() == 0);
}

TEST_CASE("axpy examples") {
  CHECK(axpy(1.0f, make_vec("p", {1, 2}), make_vec("p", {0, 0})) ==
        make_vec("p", {1, 2}));
  CHECK(axpy(0.0f, make_vec("p", {9, 9}), make_vec("p", {3, 4})) ==
        make_vec("p", {3, 4}));
  // alpha = -1 realizes theta(t) - theta(t+h).
  CHECK(axpy(-1.0f, make_vec("p", {0.5f, 2.5f}), make_vec("p", {1.0f, 2.0f})) ==
        make_vec("p", {0.5f, -0.5f}));
  CHECK_THROWS_AS(axpy(1.0f, make_vec("a", {1}), make_vec("b", {1})),
                  ShapeError);
  CHECK_THROWS_AS(
      axpy(1.0f, make_vec("p", {1}), make_vec("p", {1, 2})), ShapeError);
}

TEST_CASE("axpy leaves inputs unmodified") {
  const ParamVector x = make_vec("p", {1, 2, 3});
  const ParamVector y = make_vec("p", {4, 5, 6});
  (void)axpy(2.0f, x, y);
  CHECK(x == make_vec("p", {1, 2, 3}));
  CHECK(y == make_vec("p", {4, 5, 6}));
}

TEST_CASE("equality includes the layout") {
  auto a = ParamVector(Layout::single("model_a", 2), {1.0f, 2.0f});
  auto b = ParamVector(Layout::single("model_b", 2), {1.0f, 2.0f});
  CHECK(a != b);
  auto split = ParamVector(Layout::make({{"x", 0, 1}, {"y", 1, 1}}),
                           {1.0f, 2.0f});
  CHECK(a != split);
  CHECK(a == ParamVector(Layout::single("model_a", 2), {1.0f, 2.0f}));
}

TEST_CASE("vector encode/decode round trip and length checks") {
  const ParamVector v = make_vec("p", {1.5f, -2.0f, 0.25f});
  const Fp16Buffer buf = encode_fp16(v);
  CHECK_FALSE(buf.overflow);
  CHECK(decode_fp16(buf, v.layout()) == v);
  CHECK_THROWS_AS(decode_fp16(buf, Layout::single("p", 2)), ShapeError);

  const ParamVector big = make_vec("p", {1e9f, 1.0f});
  const Fp16Buffer overflowed = encode_fp16(big);
  CHECK(overflowed.overflow);
  CHECK(std::isinf(fp16_decode(overflowed.bits[0])));

  // Empty vector with empty layout round-trips to empty.
  const ParamVector empty(Layout::make({}), {});
  const Fp16Buffer empty_buf = encode_fp16(empty);
  CHECK(decode_fp16(empty_buf, empty.layout()).empty());
}

TEST_CASE("encode/decode is independent of segment layout") {
  const std::vector<float> data = {0.1f, 2049.0f, -7.25f, 1e-5f};
  const ParamVector one(Layout::single("all", 4), data);
  const ParamVector two(Layout::make({{"a", 0, 2}, {"b", 2, 2}}), data);
  CHECK(encode_fp16(one).bits == encode_fp16(two).bits);
}

TEST_CASE("binary serialization round trip") {
  auto layout = Layout::make({{"w", 0, 3}, {"b", 3, 1}});
  const ParamVector v(layout, {1.0f, -0.0f, 3.5e-12f, 42.0f});
  const std::vector<uint8_t> bytes = serialize_param_vector(v);
  const ParamVector back = deserialize_param_vector(bytes);
  CHECK(back == v);

  // Header is little-endian u64s: segment count first.
  CHECK(bytes[0] == 2);
  for (int i = 1; i < 8; ++i) {
    CHECK(bytes[i] == 0);
  }

  // Truncated payloads are rejected.
  std::vector<uint8_t> cut(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(deserialize_param_vector(cut), SerializationError);

  const Fp16Buffer fbuf = encode_fp16(v);
  const std::vector<uint8_t> fbytes = serialize_fp16_payload(fbuf, *layout);
  LayoutPtr lay_out;
  const Fp16Buffer fback = deserialize_fp16_payload(fbytes, lay_out);
  CHECK(fback.bits == fbuf.bits);
  CHECK(*lay_out == *layout);
}

TEST_CASE("serialization property: random vectors survive bitwise") {
  CounterRng rng(99, "serialize", 0);
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 1 + rng.next_below(64);
    const size_t split = rng.next_below(n + 1);
    std::vector<Segment> segs;
    if (split > 0) segs.push_back({"a", 0, split});
    if (split < n) segs.push_back({"b", split, n - split});
    auto layout = Layout::make(std::move(segs));
    std::vector<float> data(n);
    for (float& f : data) {
      f = std::ldexp(rng.next_uniform(-1.0f, 1.0f),
                     static_cast<int>(rng.next_below(40)) - 20);
    }
    const ParamVector v(layout, data);
    CHECK(deserialize_param_vector(serialize_param_vector(v)) == v);
  }
}
