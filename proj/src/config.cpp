// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "diloco/rng.hpp"

namespace diloco {

namespace {

std::string trim(const std::string& s) {
  const size_t first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) {
    return "";
  }
  const size_t last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) {
      throw std::invalid_argument(value);
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("field '" + key + "': expected an unsigned integer, "
                      "got '" + value + "'");
  }
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) {
      throw std::invalid_argument(value);
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("field '" + key + "': expected a number, got '" +
                      value + "'");
  }
}

std::vector<double> parse_f64_list(const std::string& key,
                                   const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) {
      out.push_back(parse_f64(key, item));
    }
  }
  return out;
}

std::string format_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

using Setter = std::function<void(RunConfig&, const std::string& key,
                                  const std::string& value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto add = [&t](const std::string& key, Setter set, Getter get) {
      t[key] = Field{std::move(set), std::move(get)};
    };

    add("mode",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.mode = run_mode_from_string(v);
        },
        [](const RunConfig& c) { return to_string(c.mode); });
    add("task_kind",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.task.kind = task_kind_from_string(v);
        },
        [](const RunConfig& c) { return to_string(c.task.kind); });
    add("input_dim",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.task.input_dim = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.task.input_dim); });
    add("hidden_dim",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.task.hidden_dim = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.task.hidden_dim); });
    add("output_dim",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.task.output_dim = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.task.output_dim); });
    add("depth",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.task.depth = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.task.depth); });
    add("dataset_size",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.task.dataset_size = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.task.dataset_size);
        });
    add("seed",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.seed = parse_u64(k, v);
          c.task.seed = c.seed;
        },
        [](const RunConfig& c) { return std::to_string(c.seed); });
    add("batch_size",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.diloco.batch_size = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.diloco.batch_size);
        });
    add("local_steps",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.diloco.local_steps_h = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.diloco.local_steps_h);
        });
    add("num_workers",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.diloco.num_workers_k = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.diloco.num_workers_k);
        });
    add("total_inner_steps",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.diloco.total_inner_steps = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.diloco.total_inner_steps);
        });
    add("reduce_precision",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.diloco.reduce_precision = precision_from_string(v);
        },
        [](const RunConfig& c) {
          return to_string(c.diloco.reduce_precision);
        });
    add("inner_lr",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.inner_lr = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) { return format_f64(c.optim.inner_lr); });
    add("warmup_steps",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.warmup_steps = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.optim.warmup_steps);
        });
    add("lr_decay",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "none") {
            c.optim.lr_decay = LrDecay::none;
          } else if (v == "cosine") {
            c.optim.lr_decay = LrDecay::cosine;
          } else {
            throw ConfigError("field '" + k + "': expected none|cosine");
          }
        },
        [](const RunConfig& c) {
          return c.optim.lr_decay == LrDecay::cosine ? "cosine" : "none";
        });
    add("weight_decay",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.weight_decay = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) { return format_f64(c.optim.weight_decay); });
    add("beta1",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.beta1 = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) { return format_f64(c.optim.beta1); });
    add("beta2",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.beta2 = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) { return format_f64(c.optim.beta2); });
    add("adam_eps",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.adam_eps = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) { return format_f64(c.optim.adam_eps); });
    add("outer_lr",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.outer_lr = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) { return format_f64(c.optim.outer_lr); });
    add("outer_momentum",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.outer_momentum = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) {
          return format_f64(c.optim.outer_momentum);
        });
    add("scaler_init_scale",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.scaler_init_scale = static_cast<float>(parse_f64(k, v));
        },
        [](const RunConfig& c) {
          return format_f64(c.optim.scaler_init_scale);
        });
    add("scaler_growth_interval",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.optim.scaler_growth_interval = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.optim.scaler_growth_interval);
        });
    add("network_file",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.network_file = v;
        },
        [](const RunConfig& c) { return c.network_file; });
    add("sim_bandwidth_mbits",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.sim_bandwidth_mbits = parse_f64(k, v);
        },
        [](const RunConfig& c) { return format_f64(c.sim_bandwidth_mbits); });
    add("sim_latency_ms",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.sim_latency_ms = parse_f64(k, v);
        },
        [](const RunConfig& c) { return format_f64(c.sim_latency_ms); });
    add("step_time_base_s",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.step_time_base_s = parse_f64(k, v);
        },
        [](const RunConfig& c) { return format_f64(c.step_time_base_s); });
    add("step_time_multipliers",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.step_time_multipliers = parse_f64_list(k, v);
        },
        [](const RunConfig& c) {
          std::string out;
          for (size_t i = 0; i < c.step_time_multipliers.size(); ++i) {
            if (i) out += ",";
            out += format_f64(c.step_time_multipliers[i]);
          }
          return out;
        });
    add("step_time_jitter_frac",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.step_time_jitter_frac = parse_f64(k, v);
        },
        [](const RunConfig& c) {
          return format_f64(c.step_time_jitter_frac);
        });
    add("comm_payload_bytes",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.comm_payload_bytes = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.comm_payload_bytes);
        });
    add("metrics_path",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.metrics_path = v;
        },
        [](const RunConfig& c) { return c.metrics_path; });
    add("checkpoint_path",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.checkpoint_path = v;
        },
        [](const RunConfig& c) { return c.checkpoint_path; });
    add("checkpoint_every_rounds",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.checkpoint_every_rounds = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.checkpoint_every_rounds);
        });
    add("eval_size",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.eval_size = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.eval_size); });
    add("run_id",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.run_id = v;
        },
        [](const RunConfig& c) { return c.run_id; });
    add("listen",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.listen = v;
        },
        [](const RunConfig& c) { return c.listen; });
    add("rendezvous",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.rendezvous = v;
        },
        [](const RunConfig& c) { return c.rendezvous; });
    add("worker_index",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.worker_index = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.worker_index); });
    add("quorum_min",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.quorum_min = parse_u64(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.quorum_min); });
    add("chunk_size_bytes",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.chunk_size_bytes = parse_u64(k, v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.chunk_size_bytes);
        });
    auto add_timeout = [&add](const std::string& key, int RunConfig::*field) {
      add(key,
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.*field = static_cast<int>(parse_u64(k, v));
          },
          [field](const RunConfig& c) { return std::to_string(c.*field); });
    };
    add_timeout("heartbeat_interval_ms", &RunConfig::heartbeat_interval_ms);
    add_timeout("suspect_after_ms", &RunConfig::suspect_after_ms);
    add_timeout("evict_after_ms", &RunConfig::evict_after_ms);
    add_timeout("barrier_timeout_ms", &RunConfig::barrier_timeout_ms);
    add_timeout("reduce_timeout_ms", &RunConfig::reduce_timeout_ms);
    add_timeout("commit_timeout_ms", &RunConfig::commit_timeout_ms);
    return t;
  }();
  return table;
}

}  // namespace

RunMode run_mode_from_string(const std::string& name) {
  if (name == "worker") return RunMode::worker;
  if (name == "simulate") return RunMode::simulate;
  if (name == "baseline_dp") return RunMode::baseline_dp;
  if (name == "baseline_single") return RunMode::baseline_single;
  throw ConfigError("field 'mode': expected "
                    "worker|simulate|baseline_dp|baseline_single, got '" +
                    name + "'");
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::worker: return "worker";
    case RunMode::simulate: return "simulate";
    case RunMode::baseline_dp: return "baseline_dp";
    case RunMode::baseline_single: return "baseline_single";
  }
  return "simulate";
}

NodeOptions RunConfig::node_options() const {
  NodeOptions options;
  options.run_id = run_id;
  options.listen = parse_address(listen);
  options.quorum_min = quorum_min;
  options.heartbeat_interval_ms = heartbeat_interval_ms;
  options.suspect_after_ms = suspect_after_ms;
  options.evict_after_ms = evict_after_ms;
  options.barrier_timeout_ms = barrier_timeout_ms;
  options.reduce_timeout_ms = reduce_timeout_ms;
  options.commit_timeout_ms = commit_timeout_ms;
  options.chunk_size_bytes = chunk_size_bytes;
  return options;
}

void apply_override(RunConfig& config, const std::string& key,
                    const std::string& value) {
  const auto& table = field_table();
  const auto it = table.find(key);
  if (it == table.end()) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  it->second.set(config, key, value);
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig config;
  config.task.seed = config.seed;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value', got '" + line + "'");
    }
    apply_override(config, trim(line.substr(0, eq)),
                   trim(line.substr(eq + 1)));
  }
  return config;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file '" + path + "'");
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

std::string canonical_config(const RunConfig& config) {
  // Output paths and deployment addresses do not change the math; a
  // checkpoint stays resumable when only those differ.
  static const std::set<std::string> excluded = {
      "metrics_path", "checkpoint_path", "checkpoint_every_rounds",
      "listen", "rendezvous"};
  std::string out;
  for (const auto& [key, field] : field_table()) {
    if (excluded.count(key)) {
      continue;
    }
    out += key;
    out += " = ";
    out += field.get(config);
    out += "\n";
  }
  return out;
}

uint64_t config_hash(const RunConfig& config) {
  return detail::fnv1a64(canonical_config(config));
}

}  // namespace diloco
