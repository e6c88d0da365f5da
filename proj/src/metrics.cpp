// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/metrics.hpp"

#include <json.hpp>

#include "diloco/errors.hpp"

namespace diloco {

namespace {

using ordered_json = nlohmann::ordered_json;

const char* kind_name(RecordKind kind) {
  switch (kind) {
    case RecordKind::step: return "step";
    case RecordKind::round: return "round";
    case RecordKind::event: return "event";
    case RecordKind::summary: return "summary";
  }
  return "step";
}

RecordKind kind_from_name(const std::string& name) {
  if (name == "step") return RecordKind::step;
  if (name == "round") return RecordKind::round;
  if (name == "event") return RecordKind::event;
  if (name == "summary") return RecordKind::summary;
  throw SerializationError("unknown metrics record kind '" + name + "'");
}

}  // namespace

std::string to_json_line(const MetricsRecord& r) {
  ordered_json j;
  j["kind"] = kind_name(r.kind);
  j["worker"] = r.worker;
  j["inner_step"] = r.inner_step;
  j["outer_epoch"] = r.outer_epoch;
  j["loss"] = r.loss;
  j["perplexity"] = r.perplexity;
  j["lr"] = r.lr;
  j["compute_ms"] = r.compute_ms;
  j["comm_ms"] = r.comm_ms;
  j["bytes_sent"] = r.bytes_sent;
  j["contributors"] = r.contributors;
  if (!r.event.empty()) {
    j["event"] = r.event;
  }
  return j.dump();
}

std::string to_json_line(const RunSummary& s) {
  ordered_json j;
  j["kind"] = "summary";
  j["total_inner_steps"] = s.total_inner_steps;
  j["outer_rounds"] = s.outer_rounds;
  j["final_loss"] = s.final_loss;
  j["final_perplexity"] = s.final_perplexity;
  j["final_train_loss"] = s.final_train_loss;
  j["reduce_data_bytes"] = s.reduce_data_bytes;
  j["reduce_wire_bytes"] = s.reduce_wire_bytes;
  j["control_bytes"] = s.control_bytes;
  j["heartbeat_bytes"] = s.heartbeat_bytes;
  j["utilization"] = s.utilization;
  j["compute_seconds"] = s.compute_seconds;
  j["comm_seconds"] = s.comm_seconds;
  j["idle_seconds"] = s.idle_seconds;
  return j.dump();
}

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {
  out_.open(path, std::ios::out | std::ios::trunc);
  if (!out_) {
    throw ConfigError("cannot open metrics file '" + path + "' for writing");
  }
}

void MetricsWriter::write(const MetricsRecord& record) {
  out_ << to_json_line(record) << '\n';
}

void MetricsWriter::write_summary(const RunSummary& summary) {
  out_ << to_json_line(summary) << '\n';
  out_.flush();
}

void MetricsWriter::flush() {
  out_.flush();
}

MetricsFile read_metrics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open metrics file '" + path + "'");
  }
  MetricsFile file;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw SerializationError(path + ":" + std::to_string(line_no) +
                               ": bad JSON: " + e.what());
    }
    const std::string kind = j.value("kind", "step");
    if (kind == "summary") {
      RunSummary s;
      s.total_inner_steps = j.value("total_inner_steps", 0ull);
      s.outer_rounds = j.value("outer_rounds", 0ull);
      s.final_loss = j.value("final_loss", 0.0f);
      s.final_perplexity = j.value("final_perplexity", 1.0f);
      s.final_train_loss = j.value("final_train_loss", 0.0f);
      s.reduce_data_bytes = j.value("reduce_data_bytes", 0ull);
      s.reduce_wire_bytes = j.value("reduce_wire_bytes", 0ull);
      s.control_bytes = j.value("control_bytes", 0ull);
      s.heartbeat_bytes = j.value("heartbeat_bytes", 0ull);
      s.utilization = j.value("utilization", 1.0);
      s.compute_seconds = j.value("compute_seconds", 0.0);
      s.comm_seconds = j.value("comm_seconds", 0.0);
      s.idle_seconds = j.value("idle_seconds", 0.0);
      file.summary = s;
      continue;
    }
    MetricsRecord r;
    r.kind = kind_from_name(kind);
    r.worker = j.value("worker", 0);
    r.inner_step = j.value("inner_step", 0ull);
    r.outer_epoch = j.value("outer_epoch", 0ull);
    r.loss = j.value("loss", 0.0f);
    r.perplexity = j.value("perplexity", 1.0f);
    r.lr = j.value("lr", 0.0f);
    r.compute_ms = j.value("compute_ms", 0.0);
    r.comm_ms = j.value("comm_ms", 0.0);
    r.bytes_sent = j.value("bytes_sent", 0ull);
    r.contributors = j.value("contributors", size_t{0});
    r.event = j.value("event", "");
    file.records.push_back(std::move(r));
  }
  return file;
}

void export_csv(const std::string& metrics_path, const std::string& csv_path) {
  const MetricsFile file = read_metrics_file(metrics_path);
  std::ofstream out(csv_path, std::ios::out | std::ios::trunc);
  if (!out) {
    throw ConfigError("cannot open csv file '" + csv_path + "' for writing");
  }
  out << "kind,worker,inner_step,outer_epoch,loss,perplexity,lr,"
         "compute_ms,comm_ms,bytes_sent,contributors\n";
  for (const MetricsRecord& r : file.records) {
    if (r.kind == RecordKind::event) {
      continue;
    }
    ordered_json loss = r.loss, ppl = r.perplexity, lr = r.lr;
    out << kind_name(r.kind) << ',' << r.worker << ',' << r.inner_step << ','
        << r.outer_epoch << ',' << loss.dump() << ',' << ppl.dump() << ','
        << lr.dump() << ',' << ordered_json(r.compute_ms).dump() << ','
        << ordered_json(r.comm_ms).dump() << ',' << r.bytes_sent << ','
        << r.contributors << '\n';
  }
  out.flush();
}

}  // namespace diloco
