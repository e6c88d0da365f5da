// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/checkpoint.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

namespace diloco {

namespace {

constexpr char kMagic[8] = {'O', 'D', 'L', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
}

void put_f64(std::vector<uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<uint64_t>(v));
}

void put_block(std::vector<uint8_t>& out, const std::vector<uint8_t>& block) {
  put_u64(out, block.size());
  out.insert(out.end(), block.begin(), block.end());
}

void put_text(std::vector<uint8_t>& out, const std::string& text) {
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
}

struct Reader {
  std::span<const uint8_t> data;
  size_t cursor = 0;

  uint64_t u64() {
    if (cursor + 8 > data.size()) {
      throw SerializationError("checkpoint truncated");
    }
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(data[cursor + i]) << (8 * i);
    }
    cursor += 8;
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  std::span<const uint8_t> block() {
    const uint64_t n = u64();
    if (cursor + n > data.size()) {
      throw SerializationError("checkpoint truncated");
    }
    auto out = data.subspan(cursor, n);
    cursor += n;
    return out;
  }

  std::string text() {
    const auto b = block();
    return std::string(reinterpret_cast<const char*>(b.data()), b.size());
  }
};

// Optimizer scalars as FP64 text: "key=value" lines.
std::string scalar_header(const EngineState& state) {
  char buf[512];
  std::snprintf(
      buf, sizeof(buf),
      "step_count=%" PRIu64 "\nbeta1=%.17g\nbeta2=%.17g\neps=%.17g\n"
      "weight_decay=%.17g\nouter_lr=%.17g\nouter_momentum=%.17g\n"
      "scale=%.17g\ngrowth_interval=%" PRIu64 "\nconsecutive_good=%" PRIu64
      "\ninner_step=%" PRIu64 "\nouter_epoch=%" PRIu64 "\n",
      state.inner.step_count, static_cast<double>(state.inner.beta1),
      static_cast<double>(state.inner.beta2),
      static_cast<double>(state.inner.eps),
      static_cast<double>(state.inner.weight_decay),
      static_cast<double>(state.outer.lr),
      static_cast<double>(state.outer.momentum),
      static_cast<double>(state.scaler.scale), state.scaler.growth_interval,
      state.scaler.consecutive_good, state.inner_step, state.outer_epoch);
  return buf;
}

void parse_scalar_header(const std::string& text, EngineState& state) {
  std::map<std::string, std::string> kv;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t nl = text.find('\n', pos);
    const std::string line =
        text.substr(pos, nl == std::string::npos ? nl : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    const size_t eq = line.find('=');
    if (eq != std::string::npos) {
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  auto need = [&kv](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
      throw SerializationError("checkpoint header missing '" + key + "'");
    }
    return it->second;
  };
  state.inner.step_count = std::stoull(need("step_count"));
  state.inner.beta1 = static_cast<float>(std::stod(need("beta1")));
  state.inner.beta2 = static_cast<float>(std::stod(need("beta2")));
  state.inner.eps = static_cast<float>(std::stod(need("eps")));
  state.inner.weight_decay =
      static_cast<float>(std::stod(need("weight_decay")));
  state.outer.lr = static_cast<float>(std::stod(need("outer_lr")));
  state.outer.momentum =
      static_cast<float>(std::stod(need("outer_momentum")));
  state.scaler.scale = static_cast<float>(std::stod(need("scale")));
  state.scaler.growth_interval = std::stoull(need("growth_interval"));
  state.scaler.consecutive_good = std::stoull(need("consecutive_good"));
  state.inner_step = std::stoull(need("inner_step"));
  state.outer_epoch = std::stoull(need("outer_epoch"));
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  put_u64(out, checkpoint.config_hash);
  put_u64(out, checkpoint.completed_rounds);
  put_f64(out, checkpoint.clock_seconds);
  put_u64(out, checkpoint.reduce_data_bytes);
  put_u64(out, checkpoint.ledger.workers.size());
  for (const WorkerLedger& w : checkpoint.ledger.workers) {
    put_f64(out, w.compute_seconds);
    put_f64(out, w.comm_seconds);
    put_f64(out, w.idle_seconds);
  }
  put_u64(out, checkpoint.engines.size());
  for (const EngineState& state : checkpoint.engines) {
    put_text(out, scalar_header(state));
    put_block(out, serialize_param_vector(state.theta_t));
    put_block(out, serialize_param_vector(state.theta_local));
    put_block(out, serialize_param_vector(state.inner.m));
    put_block(out, serialize_param_vector(state.inner.v));
    put_block(out, serialize_param_vector(state.outer.momentum_buf));
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) {
    throw ConfigError("cannot open checkpoint file '" + path + "'");
  }
  file.write(reinterpret_cast<const char*>(out.data()),
             static_cast<std::streamsize>(out.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) {
    throw ConfigError("cannot open checkpoint file '" + path + "'");
  }
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(file)),
                            std::istreambuf_iterator<char>());
  if (data.size() < 8 || std::memcmp(data.data(), kMagic, 8) != 0) {
    throw SerializationError("not a checkpoint file: bad magic");
  }
  Reader reader{std::span(data).subspan(8)};
  Checkpoint checkpoint;
  checkpoint.config_hash = reader.u64();
  checkpoint.completed_rounds = reader.u64();
  checkpoint.clock_seconds = reader.f64();
  checkpoint.reduce_data_bytes = reader.u64();
  const uint64_t worker_count = reader.u64();
  checkpoint.ledger.workers.resize(worker_count);
  for (uint64_t i = 0; i < worker_count; ++i) {
    checkpoint.ledger.workers[i].compute_seconds = reader.f64();
    checkpoint.ledger.workers[i].comm_seconds = reader.f64();
    checkpoint.ledger.workers[i].idle_seconds = reader.f64();
  }
  const uint64_t engine_count = reader.u64();
  for (uint64_t i = 0; i < engine_count; ++i) {
    EngineState state;
    const std::string header = reader.text();
    state.theta_t = deserialize_param_vector(reader.block());
    state.theta_local = deserialize_param_vector(reader.block());
    state.inner.m = deserialize_param_vector(reader.block());
    state.inner.v = deserialize_param_vector(reader.block());
    state.outer.momentum_buf = deserialize_param_vector(reader.block());
    parse_scalar_header(header, state);
    checkpoint.engines.push_back(std::move(state));
  }
  return checkpoint;
}

}  // namespace diloco
