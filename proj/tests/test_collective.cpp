// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include "diloco/collective.hpp"
#include "diloco/rng.hpp"

using namespace diloco;
using namespace std::chrono_literals;

namespace {

NodeOptions test_options(const std::string& run_id) {
  NodeOptions options;
  options.run_id = run_id;
  options.heartbeat_interval_ms = 40;
  options.suspect_after_ms = 250;
  options.evict_after_ms = 1200;
  options.barrier_timeout_ms = 500;
  options.reduce_timeout_ms = 900;
  options.commit_timeout_ms = 700;
  options.dial_timeout_ms = 400;
  options.max_restarts = 3;
  return options;
}

// K nodes on localhost, joined through node 0.
struct Fleet {
  std::vector<std::unique_ptr<Node>> nodes;

  explicit Fleet(size_t k, const std::string& run_id,
                 NodeOptions options = NodeOptions{}) {
    options = [&] {
      NodeOptions o = test_options(run_id);
      o.quorum_min = options.quorum_min ? options.quorum_min : 1;
      return o;
    }();
    for (size_t i = 0; i < k; ++i) {
      nodes.push_back(std::make_unique<Node>(options));
      if (i == 0) {
        nodes[0]->join(std::nullopt);
      } else {
        nodes[i]->join(nodes[0]->address());
      }
    }
    wait_for_full_view();
  }

  void wait_for_full_view() {
    const auto deadline = std::chrono::steady_clock::now() + 5s;
    while (std::chrono::steady_clock::now() < deadline) {
      bool converged = true;
      for (const auto& node : nodes) {
        if (node->membership().peers.size() != nodes.size()) {
          converged = false;
          break;
        }
      }
      if (converged) {
        return;
      }
      std::this_thread::sleep_for(10ms);
    }
    FAIL("fleet membership did not converge");
  }

  ~Fleet() {
    for (auto& node : nodes) {
      node->shutdown_abrupt();
    }
  }
};

ParamVector delta_vector(size_t n, uint64_t seed) {
  CounterRng rng(seed, "delta", 0);
  std::vector<float> data(n);
  for (float& f : data) {
    f = rng.next_uniform(-2.0f, 2.0f);
  }
  auto layout = Layout::single("delta", n);
  return ParamVector(std::move(layout), std::move(data));
}

PseudoGradient make_pg(ParamVector delta, uint64_t epoch,
                       Precision precision = Precision::fp32) {
  PseudoGradient pg;
  pg.delta = std::move(delta);
  pg.precision = precision;
  pg.outer_epoch = epoch;
  return pg;
}

// Run one all-reduce round on every node concurrently.
std::vector<PseudoGradient> reduce_all(
    Fleet& fleet, const std::vector<PseudoGradient>& locals,
    std::vector<ReduceReport>* reports = nullptr) {
  const size_t k = fleet.nodes.size();
  std::vector<PseudoGradient> results(k);
  std::vector<ReduceReport> local_reports(k);
  std::vector<std::thread> threads;
  std::vector<std::string> errors(k);
  for (size_t i = 0; i < k; ++i) {
    threads.emplace_back([&, i] {
      try {
        results[i] = fleet.nodes[i]->all_reduce_avg(locals[i],
                                                    &local_reports[i], {});
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }
  for (size_t i = 0; i < k; ++i) {
    INFO("worker ", i, ": ", errors[i]);
    REQUIRE(errors[i].empty());
  }
  if (reports) {
    *reports = local_reports;
  }
  return results;
}

}  // namespace

TEST_CASE("wire frame layout is bit-exact") {
  WireMessage message;
  message.type = MsgType::heartbeat;
  message.payload = {0xAA, 0xBB};
  const std::vector<uint8_t> frame = encode_frame(message);
  REQUIRE(frame.size() == 16);
  CHECK(frame[0] == 'O');
  CHECK(frame[1] == 'D');
  CHECK(frame[2] == 'L');
  CHECK(frame[3] == 'C');
  CHECK(frame[4] == 1);   // version
  CHECK(frame[5] == 3);   // HEARTBEAT
  CHECK(frame[6] == 2);   // payload length, little-endian u64
  for (int i = 7; i < 14; ++i) {
    CHECK(frame[i] == 0);
  }
  CHECK(frame[14] == 0xAA);
  CHECK(frame[15] == 0xBB);

  FrameParser parser;
  parser.feed(std::span(frame.data(), 5));  // partial feed
  CHECK_FALSE(parser.next().has_value());
  parser.feed(std::span(frame.data() + 5, frame.size() - 5));
  const auto decoded = parser.next();
  REQUIRE(decoded.has_value());
  CHECK(decoded->type == MsgType::heartbeat);
  CHECK(decoded->payload == message.payload);

  std::vector<uint8_t> bad = frame;
  bad[0] = 'X';
  FrameParser bad_parser;
  bad_parser.feed(bad);
  CHECK_THROWS_AS(bad_parser.next(), SerializationError);
}

TEST_CASE("reduce payload prefix layout") {
  ReduceChunkHeader header;
  header.outer_epoch = 7;
  header.chunk_index = 3;
  header.precision = 1;
  const std::vector<uint8_t> segment = {1, 2, 3};
  const std::vector<uint8_t> payload = encode_reduce_payload(header, segment);
  REQUIRE(payload.size() == 16);
  CHECK(payload[0] == 7);    // epoch u64 LE
  CHECK(payload[8] == 3);    // chunk_index u32 LE
  CHECK(payload[12] == 1);   // precision u8
  std::span<const uint8_t> seg_out;
  const ReduceChunkHeader back = decode_reduce_payload(payload, seg_out);
  CHECK(back.outer_epoch == 7);
  CHECK(back.chunk_index == 3);
  CHECK(back.precision == 1);
  REQUIRE(seg_out.size() == 3);
}

TEST_CASE("heartbeat_tick transitions") {
  Membership m;
  m.epoch = 4;
  PeerId a{1, 1}, b{2, 2};
  m.upsert(PeerInfo{a, {"127.0.0.1", 1}, 1000, PeerStatus::live});
  m.upsert(PeerInfo{b, {"127.0.0.1", 2}, 1000, PeerStatus::live});

  // All fresh: unchanged, same epoch.
  Membership fresh = heartbeat_tick(m, 1100, 500, 2000);
  CHECK(fresh.epoch == 4);
  CHECK(fresh.peers.size() == 2);

  // One peer silent past suspect_after.
  m.find(b)->last_heartbeat_ms = 0;
  Membership suspected = heartbeat_tick(m, 1100, 500, 2000);
  CHECK(suspected.epoch == 5);
  CHECK(suspected.find(b)->status == PeerStatus::suspected);

  // Silent past 2x evict_after: removed. The other peer stays fresh.
  m.find(a)->last_heartbeat_ms = 3900;
  Membership evicted = heartbeat_tick(m, 4000, 500, 2000);
  CHECK(evicted.epoch == 5);
  CHECK(evicted.find(b) == nullptr);
  CHECK(evicted.peers.size() == 1);

  // Suspected peer resumes heartbeats: back to live.
  Membership with_suspect = suspected;
  with_suspect.find(b)->last_heartbeat_ms = 1100;
  Membership recovered = heartbeat_tick(with_suspect, 1150, 500, 2000);
  CHECK(recovered.epoch == 6);
  CHECK(recovered.find(b)->status == PeerStatus::live);
}

TEST_CASE("bootstrap join creates a one-peer membership") {
  NodeOptions options = test_options("boot");
  Node node(options);
  const Membership m = node.join(std::nullopt);
  CHECK(m.epoch == 1);
  REQUIRE(m.peers.size() == 1);
  CHECK(m.peers[0].id == node.id());
  CHECK(m.peers[0].status == PeerStatus::live);
  // Registered under the run key.
  CHECK(node.store_get_local("run/boot/peers").has_value());
  node.leave();
}

TEST_CASE("four peers converge to identical orderings") {
  Fleet fleet(4, "order");
  std::vector<std::vector<std::string>> orders;
  for (const auto& node : fleet.nodes) {
    std::vector<std::string> ids;
    for (const PeerInfo& peer : node->membership().peers) {
      ids.push_back(peer.id.hex());
    }
    orders.push_back(ids);
  }
  for (size_t i = 1; i < orders.size(); ++i) {
    CHECK(orders[i] == orders[0]);
  }
  // Sorted by id.
  auto sorted = orders[0];
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == orders[0]);
}

TEST_CASE("run_id mismatch is rejected at join") {
  NodeOptions options = test_options("run-a");
  Node a(options);
  a.join(std::nullopt);
  NodeOptions wrong = test_options("run-b");
  Node b(wrong);
  CHECK_THROWS_AS(b.join(a.address()), ConfigError);
  a.leave();
}

TEST_CASE("replicated store propagates puts and serves gets") {
  Fleet fleet(3, "store");
  fleet.nodes[1]->store_put("config/answer", {4, 2});
  const auto deadline = std::chrono::steady_clock::now() + 2s;
  bool replicated = false;
  while (std::chrono::steady_clock::now() < deadline && !replicated) {
    replicated = fleet.nodes[0]->store_get_local("config/answer").has_value() &&
                 fleet.nodes[2]->store_get_local("config/answer").has_value();
    std::this_thread::sleep_for(10ms);
  }
  CHECK(replicated);
  // Remote get against any live peer.
  const auto remote =
      fleet.nodes[2]->store_get_remote(fleet.nodes[0]->address(),
                                       "config/answer");
  REQUIRE(remote.has_value());
  CHECK(*remote == std::vector<uint8_t>{4, 2});

  // Dynamic provider answers for keys outside the replicated map.
  fleet.nodes[0]->set_dynamic_provider(
      [](const std::string& key) -> std::optional<std::vector<uint8_t>> {
        if (key == "live/value") {
          return std::vector<uint8_t>{7};
        }
        return std::nullopt;
      });
  const auto dynamic =
      fleet.nodes[1]->store_get_remote(fleet.nodes[0]->address(),
                                       "live/value");
  REQUIRE(dynamic.has_value());
  CHECK(*dynamic == std::vector<uint8_t>{7});
}

TEST_CASE("barrier returns identical contributor sets") {
  Fleet fleet(4, "barrier");
  std::vector<std::vector<PeerId>> outcomes(4);
  std::vector<std::thread> threads;
  for (size_t i = 0; i < 4; ++i) {
    threads.emplace_back(
        [&, i] { outcomes[i] = fleet.nodes[i]->barrier(0); });
  }
  for (auto& t : threads) {
    t.join();
  }
  for (size_t i = 1; i < 4; ++i) {
    CHECK(outcomes[i] == outcomes[0]);
  }
  CHECK(outcomes[0].size() == 4);
}

TEST_CASE("barrier excludes a peer that never arrives") {
  Fleet fleet(4, "barrier-miss");
  // The highest id never checks in; it cannot be the coordinator.
  size_t absent = 0;
  for (size_t i = 1; i < 4; ++i) {
    if (fleet.nodes[i]->id() > fleet.nodes[absent]->id()) {
      absent = i;
    }
  }
  std::vector<std::vector<PeerId>> outcomes(4);
  std::vector<std::thread> threads;
  for (size_t i = 0; i < 4; ++i) {
    if (i == static_cast<size_t>(absent)) {
      continue;
    }
    threads.emplace_back(
        [&, i] { outcomes[i] = fleet.nodes[i]->barrier(1); });
  }
  for (auto& t : threads) {
    t.join();
  }
  std::vector<PeerId>* reference = nullptr;
  for (size_t i = 0; i < 4; ++i) {
    if (i == static_cast<size_t>(absent)) {
      continue;
    }
    if (!reference) {
      reference = &outcomes[i];
      CHECK(outcomes[i].size() == 3);
    } else {
      CHECK(outcomes[i] == *reference);
    }
  }
}

TEST_CASE("single-peer barrier returns immediately") {
  Fleet fleet(1, "solo-barrier");
  const auto contributors = fleet.nodes[0]->barrier(0);
  REQUIRE(contributors.size() == 1);
  CHECK(contributors[0] == fleet.nodes[0]->id());
}

TEST_CASE("two-peer average") {
  Fleet fleet(2, "avg2");
  auto l0 = Layout::single("delta", 2);
  std::vector<PseudoGradient> locals;
  locals.push_back(make_pg(ParamVector(l0, {2.0f, 4.0f}), 0));
  locals.push_back(make_pg(ParamVector(l0, {4.0f, 8.0f}), 0));
  const auto results = reduce_all(fleet, locals);
  for (const auto& result : results) {
    CHECK(result.delta[0] == 3.0f);
    CHECK(result.delta[1] == 6.0f);
  }
}

TEST_CASE("agreement: every peer holds bitwise-identical reductions") {
  for (Precision precision : {Precision::fp32, Precision::fp16}) {
    CAPTURE(to_string(precision));
    Fleet fleet(4, "agree-" + to_string(precision));
    std::vector<PseudoGradient> locals;
    for (size_t i = 0; i < 4; ++i) {
      locals.push_back(make_pg(delta_vector(97, 100 + i), 0, precision));
    }
    const auto results = reduce_all(fleet, locals);
    for (size_t i = 1; i < 4; ++i) {
      CHECK(results[i].delta == results[0].delta);
    }
    // Matches the shared kernel bit for bit (transport neutrality).
    std::vector<const ParamVector*> contributions;
    // Kernel folds in peer-sorted order; sort the locals accordingly.
    std::vector<size_t> order(4);
    for (size_t i = 0; i < 4; ++i) {
      order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&fleet](size_t a, size_t b) {
      return fleet.nodes[a]->id() < fleet.nodes[b]->id();
    });
    for (size_t i : order) {
      contributions.push_back(&locals[i].delta);
    }
    const ParamVector expected = reduce_average(contributions, precision);
    CHECK(results[0].delta == expected);
  }
}

TEST_CASE("linearity within accumulation tolerance") {
  Fleet fleet(3, "linear");
  const float alpha = 3.25f;
  std::vector<PseudoGradient> locals, scaled;
  for (size_t i = 0; i < 3; ++i) {
    ParamVector delta = delta_vector(64, 500 + i);
    ParamVector delta_scaled = delta;
    for (float& v : delta_scaled.mutable_values()) {
      v *= alpha;
    }
    locals.push_back(make_pg(std::move(delta), 0));
    scaled.push_back(make_pg(std::move(delta_scaled), 1));
  }
  const auto base = reduce_all(fleet, locals);
  const auto scaled_result = reduce_all(fleet, scaled);
  for (size_t i = 0; i < 64; ++i) {
    const double want = static_cast<double>(base[0].delta[i]) * alpha;
    const double got = scaled_result[0].delta[i];
    CHECK(std::fabs(got - want) <=
          1e-6 * std::max(1.0, std::fabs(want)));
  }
}

TEST_CASE("per-peer reduce bytes follow the ring bound") {
  const size_t n = 24 * 50;  // divisible by every tested K
  for (size_t k : {2, 3, 4}) {
    CAPTURE(k);
    Fleet fleet(k, "bytes-" + std::to_string(k));
    std::vector<PseudoGradient> locals;
    for (size_t i = 0; i < k; ++i) {
      locals.push_back(make_pg(delta_vector(n, 900 + i), 0));
    }
    std::vector<ReduceReport> reports;
    reduce_all(fleet, locals, &reports);
    const double bound = 2.0 * static_cast<double>(k - 1) /
                         static_cast<double>(k) *
                         static_cast<double>(payload_bytes(n, Precision::fp32));
    for (size_t i = 0; i < k; ++i) {
      CHECK(reports[i].contributors == k);
      CHECK(std::fabs(static_cast<double>(reports[i].data_bytes_sent) - bound)
            <= 0.05 * bound);
      // Data bytes are exact for balanced partitions.
      CHECK(reports[i].data_bytes_sent ==
            per_peer_reduce_bytes(n, k, i == 0 ? 0 : i, Precision::fp32));
    }
  }
}

TEST_CASE("fp16 rounds halve the scalar payload") {
  const size_t n = 24 * 10;
  Fleet fleet(2, "fp16-bytes");
  std::vector<PseudoGradient> locals32, locals16;
  for (size_t i = 0; i < 2; ++i) {
    locals32.push_back(make_pg(delta_vector(n, 40 + i), 0, Precision::fp32));
    locals16.push_back(make_pg(delta_vector(n, 40 + i), 1, Precision::fp16));
  }
  std::vector<ReduceReport> r32, r16;
  reduce_all(fleet, locals32, &r32);
  reduce_all(fleet, locals16, &r16);
  CHECK(r16[0].data_bytes_sent * 2 == r32[0].data_bytes_sent);
}

TEST_CASE("killing one of four peers mid-reduce leaves survivor mean") {
  Fleet fleet(4, "kill");
  // Sort workers by id to locate ranks deterministically.
  std::vector<size_t> order(4);
  for (size_t i = 0; i < 4; ++i) {
    order[i] = i;
  }
  std::sort(order.begin(), order.end(), [&fleet](size_t a, size_t b) {
    return fleet.nodes[a]->id() < fleet.nodes[b]->id();
  });
  const size_t victim = order[2];  // mid-ring, not the coordinator

  auto layout = Layout::single("delta", 48);
  std::vector<PseudoGradient> locals;
  for (size_t i = 0; i < 4; ++i) {
    std::vector<float> data(48, static_cast<float>(i + 1));
    locals.push_back(make_pg(ParamVector(layout, std::move(data)), 0));
  }

  std::vector<PseudoGradient> results(4);
  std::vector<ReduceReport> reports(4);
  std::vector<int> outcome(4, 0);  // 1 done, -1 failed
  std::vector<std::thread> threads;
  for (size_t i = 0; i < 4; ++i) {
    threads.emplace_back([&, i] {
      SocketCollective collective(*fleet.nodes[i]);
      if (i == victim) {
        collective.set_stage_hook([&](const char* stage) {
          if (std::string(stage) == "gather") {
            fleet.nodes[i]->shutdown_abrupt();
            throw std::runtime_error("killed");
          }
        });
      }
      try {
        results[i] = collective.all_reduce_avg(locals[i], &reports[i]);
        outcome[i] = 1;
      } catch (const std::exception&) {
        outcome[i] = -1;
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }

  CHECK(outcome[victim] == -1);
  // Survivors complete with the survivor mean and survivor divisor.
  double expected = 0.0;
  for (size_t i = 0; i < 4; ++i) {
    if (i != victim) {
      expected += static_cast<double>(i + 1);
    }
  }
  expected /= 3.0;
  const ParamVector* reference = nullptr;
  for (size_t i = 0; i < 4; ++i) {
    if (i == victim) {
      continue;
    }
    REQUIRE(outcome[i] == 1);
    CHECK(reports[i].contributors == 3);
    CHECK(reports[i].attempts >= 2);
    for (float v : results[i].delta.values()) {
      CHECK(v == doctest::Approx(expected).epsilon(1e-6));
    }
    if (!reference) {
      reference = &results[i].delta;
    } else {
      CHECK(*reference == results[i].delta);
    }
  }
}

TEST_CASE("joiner stays joining until the next round boundary") {
  Fleet fleet(2, "onramp");
  // Run one round so the fleet is mid-training.
  auto layout = Layout::single("delta", 8);
  std::vector<PseudoGradient> locals;
  locals.push_back(make_pg(ParamVector(layout, std::vector<float>(8, 1.f)), 0));
  locals.push_back(make_pg(ParamVector(layout, std::vector<float>(8, 2.f)), 0));
  reduce_all(fleet, locals);

  // Join mid-epoch: status must be joining on the serving peers.
  NodeOptions options = test_options("onramp");
  Node late(options);
  late.join(fleet.nodes[0]->address());
  const Membership serving = fleet.nodes[0]->membership();
  const PeerInfo* entry = serving.find(late.id());
  REQUIRE(entry != nullptr);
  CHECK(entry->status == PeerStatus::joining);

  // Next round resolves without the joiner, then promotes it to live.
  std::vector<PseudoGradient> next;
  next.push_back(make_pg(ParamVector(layout, std::vector<float>(8, 1.f)), 1));
  next.push_back(make_pg(ParamVector(layout, std::vector<float>(8, 2.f)), 1));
  std::vector<ReduceReport> reports;
  reduce_all(fleet, next, &reports);
  CHECK(reports[0].contributors == 2);

  const auto deadline = std::chrono::steady_clock::now() + 2s;
  bool live = false;
  while (std::chrono::steady_clock::now() < deadline && !live) {
    const Membership m = fleet.nodes[0]->membership();
    const PeerInfo* p = m.find(late.id());
    live = p && p->status == PeerStatus::live;
    std::this_thread::sleep_for(10ms);
  }
  CHECK(live);
  late.shutdown_abrupt();
}

TEST_CASE("eviction by silence increments the epoch and removes the peer") {
  Fleet fleet(3, "evict");
  const uint64_t epoch_before = fleet.nodes[0]->membership().epoch;
  const PeerId dead = fleet.nodes[2]->id();
  fleet.nodes[2]->shutdown_abrupt();

  const auto deadline = std::chrono::steady_clock::now() + 5s;
  bool evicted = false;
  while (std::chrono::steady_clock::now() < deadline && !evicted) {
    const Membership m = fleet.nodes[0]->membership();
    evicted = m.find(dead) == nullptr;
    std::this_thread::sleep_for(20ms);
  }
  CHECK(evicted);
  CHECK(fleet.nodes[0]->membership().epoch > epoch_before);
}
