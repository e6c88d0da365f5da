// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: engine states plus the config hash and data cursor, in the
// tensor-core binary format. Vectors are serialized buffers; optimizer
// scalars travel as FP64 text so a checkpoint is diffable with strings.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diloco/engine.hpp"
#include "diloco/netsim.hpp"

namespace diloco {

struct Checkpoint {
  uint64_t config_hash = 0;
  uint64_t completed_rounds = 0;
  double clock_seconds = 0.0;
  uint64_t reduce_data_bytes = 0;
  UtilizationLedger ledger;
  std::vector<EngineState> engines;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace diloco
