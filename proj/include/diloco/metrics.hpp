// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-step JSONL telemetry. One record per inner step, one per outer
// round, occasional protocol events, and a final summary line. Records
// are append-only so a faulted run leaves a readable file.

#pragma once

#include <cstdint>
#include <functional>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace diloco {

enum class RecordKind { step, round, event, summary };

struct MetricsRecord {
  RecordKind kind = RecordKind::step;
  int worker = 0;
  uint64_t inner_step = 0;
  uint64_t outer_epoch = 0;
  float loss = 0.0f;
  float perplexity = 1.0f;
  float lr = 0.0f;
  double compute_ms = 0.0;
  double comm_ms = 0.0;
  uint64_t bytes_sent = 0;
  size_t contributors = 0;
  std::string event;  // non-empty for kind==event
};

struct RunSummary {
  uint64_t total_inner_steps = 0;
  uint64_t outer_rounds = 0;
  float final_loss = 0.0f;       // held-out evaluation loss
  float final_perplexity = 1.0f;
  float final_train_loss = 0.0f;
  uint64_t reduce_data_bytes = 0;   // scalar payload, fleet-wide
  uint64_t reduce_wire_bytes = 0;   // payload + framing
  uint64_t control_bytes = 0;       // rendezvous / barrier / membership
  uint64_t heartbeat_bytes = 0;
  double utilization = 1.0;
  double compute_seconds = 0.0;
  double comm_seconds = 0.0;
  double idle_seconds = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

std::string to_json_line(const MetricsRecord& record);
std::string to_json_line(const RunSummary& summary);

/// Line-buffered JSONL writer.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);

  void write(const MetricsRecord& record);
  void write_summary(const RunSummary& summary);
  void flush();

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

struct MetricsFile {
  std::vector<MetricsRecord> records;
  std::optional<RunSummary> summary;
};

/// Parse a metrics file back; used by the ablation analysis and CSV export.
MetricsFile read_metrics_file(const std::string& path);

/// Tidy CSV with one row per step/round record.
void export_csv(const std::string& metrics_path, const std::string& csv_path);

}  // namespace diloco
