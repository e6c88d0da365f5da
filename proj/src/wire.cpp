// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/wire.hpp"

#include <cstring>

namespace diloco {

std::vector<uint8_t> encode_frame(const WireMessage& message) {
  std::vector<uint8_t> out;
  out.reserve(kFrameHeaderBytes + message.payload.size());
  out.insert(out.end(), kWireMagic, kWireMagic + 4);
  out.push_back(kWireVersion);
  out.push_back(static_cast<uint8_t>(message.type));
  const uint64_t len = message.payload.size();
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<uint8_t>(len >> (8 * i)));
  }
  out.insert(out.end(), message.payload.begin(), message.payload.end());
  return out;
}

void FrameParser::feed(std::span<const uint8_t> bytes) {
  // Compact occasionally so long-lived connections do not grow the buffer.
  if (consumed_ > 0 && consumed_ == buffer_.size()) {
    buffer_.clear();
    consumed_ = 0;
  } else if (consumed_ > 1 << 20) {
    buffer_.erase(buffer_.begin(),
                  buffer_.begin() + static_cast<ptrdiff_t>(consumed_));
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<WireMessage> FrameParser::next() {
  const size_t available = buffer_.size() - consumed_;
  if (available < kFrameHeaderBytes) {
    return std::nullopt;
  }
  const uint8_t* frame = buffer_.data() + consumed_;
  if (std::memcmp(frame, kWireMagic, 4) != 0) {
    throw SerializationError("bad frame magic");
  }
  if (frame[4] != kWireVersion) {
    throw SerializationError("unsupported wire version " +
                             std::to_string(frame[4]));
  }
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) {
    len |= static_cast<uint64_t>(frame[6 + i]) << (8 * i);
  }
  if (len > (1ull << 33)) {
    throw SerializationError("implausible frame length");
  }
  if (available < kFrameHeaderBytes + len) {
    return std::nullopt;
  }
  WireMessage message;
  const uint8_t type = frame[5];
  if (type < 1 || type > 9) {
    throw SerializationError("unknown message type " + std::to_string(type));
  }
  message.type = static_cast<MsgType>(type);
  message.payload.assign(frame + kFrameHeaderBytes,
                         frame + kFrameHeaderBytes + len);
  consumed_ += kFrameHeaderBytes + len;
  return message;
}

std::vector<uint8_t> encode_reduce_payload(const ReduceChunkHeader& header,
                                           std::span<const uint8_t> segment) {
  std::vector<uint8_t> out;
  out.reserve(13 + segment.size());
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<uint8_t>(header.outer_epoch >> (8 * i)));
  }
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<uint8_t>(header.chunk_index >> (8 * i)));
  }
  out.push_back(header.precision);
  out.insert(out.end(), segment.begin(), segment.end());
  return out;
}

ReduceChunkHeader decode_reduce_payload(
    std::span<const uint8_t> payload, std::span<const uint8_t>& segment_out) {
  if (payload.size() < 13) {
    throw SerializationError("truncated reduce payload");
  }
  ReduceChunkHeader header;
  for (int i = 0; i < 8; ++i) {
    header.outer_epoch |= static_cast<uint64_t>(payload[i]) << (8 * i);
  }
  for (int i = 0; i < 4; ++i) {
    header.chunk_index |= static_cast<uint32_t>(payload[8 + i]) << (8 * i);
  }
  header.precision = payload[12];
  segment_out = payload.subspan(13);
  return header;
}

}  // namespace diloco
