// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Framed message codec shared by every transport.
//
// Frame (bit-exact): magic "ODLC" (4 bytes) | version u8 | type u8 |
// payload length u64 little-endian | payload.
//
// Reduce payloads are binary: outer_epoch u64 | chunk_index u32 |
// precision u8 | serialized segment (tensor-core format; the segment name
// carries attempt/partition/sender tags, offset/length give the element
// range). Control payloads (HELLO, PEER_SET, BARRIER, STORE_*) are JSON
// documents; see collective.cpp for their schemas.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diloco/errors.hpp"

namespace diloco {

constexpr uint8_t kWireVersion = 1;
constexpr uint8_t kWireMagic[4] = {'O', 'D', 'L', 'C'};
constexpr size_t kFrameHeaderBytes = 4 + 1 + 1 + 8;

enum class MsgType : uint8_t {
  hello = 1,
  peer_set = 2,
  heartbeat = 3,
  barrier = 4,
  reduce_chunk = 5,
  reduce_result = 6,
  leave = 7,
  store_put = 8,
  store_get = 9,
};

struct WireMessage {
  MsgType type = MsgType::heartbeat;
  std::vector<uint8_t> payload;
};

std::vector<uint8_t> encode_frame(const WireMessage& message);

/// Incremental stream reassembler. Feed bytes as they arrive; complete
/// frames pop out in order. Throws SerializationError on bad magic or
/// version.
class FrameParser {
 public:
  void feed(std::span<const uint8_t> bytes);
  std::optional<WireMessage> next();

 private:
  std::vector<uint8_t> buffer_;
  size_t consumed_ = 0;
};

// Reduce payload helpers.
struct ReduceChunkHeader {
  uint64_t outer_epoch = 0;
  uint32_t chunk_index = 0;
  uint8_t precision = 0;
};

std::vector<uint8_t> encode_reduce_payload(const ReduceChunkHeader& header,
                                           std::span<const uint8_t> segment);
ReduceChunkHeader decode_reduce_payload(std::span<const uint8_t> payload,
                                        std::span<const uint8_t>& segment_out);

}  // namespace diloco
