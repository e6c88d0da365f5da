// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Peer-to-peer membership, rendezvous and fault-tolerant average
// all-reduce. There is no master: any live peer serves joins, the
// metadata store is replicated to every peer on change, and the barrier
// coordinator for a round is simply the lowest live peer id, recomputed
// when peers die.
//
// A reduce round runs as: barrier (contributor agreement) -> direct
// scatter of each partition to its owner -> FP32 fold in peer-sorted
// order at the owner -> ring relay all-gather of owner partitions ->
// commit handshake. Failures restart the round with the survivors, at
// most `max_restarts` times, then the quorum check decides abort.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "diloco/net.hpp"
#include "diloco/reduce.hpp"

namespace diloco {

struct PeerId {
  uint64_t hi = 0;
  uint64_t lo = 0;

  static PeerId random();
  static PeerId from_hex(const std::string& hex);
  std::string hex() const;
  std::string short_hex() const { return hex().substr(0, 8); }

  auto operator<=>(const PeerId&) const = default;
};

enum class PeerStatus : uint8_t { joining, live, suspected, left };

std::string to_string(PeerStatus status);

struct PeerInfo {
  PeerId id;
  Address address;
  int64_t last_heartbeat_ms = 0;
  PeerStatus status = PeerStatus::live;
};

/// Epoch-stamped peer set, always ordered by peer id so every holder of
/// the same epoch sees the same order.
struct Membership {
  uint64_t epoch = 0;
  std::vector<PeerInfo> peers;
  size_t quorum_min = 1;

  const PeerInfo* find(const PeerId& id) const;
  PeerInfo* find(const PeerId& id);
  void upsert(PeerInfo info);   // keeps the order; no epoch bump
  bool erase(const PeerId& id);
  std::vector<PeerId> live_ids() const;  // live peers only, sorted
  size_t live_count() const;
};

/// Pure failure-detector sweep: peers silent longer than suspect_after
/// become suspected, longer than evict_after are removed; suspected peers
/// with fresh heartbeats recover to live. Any change increments the
/// epoch.
Membership heartbeat_tick(const Membership& membership, int64_t now_ms,
                          int64_t suspect_after_ms, int64_t evict_after_ms);

struct NodeOptions {
  std::string run_id = "default";
  Address listen{"127.0.0.1", 0};
  size_t quorum_min = 1;
  int heartbeat_interval_ms = 100;
  int suspect_after_ms = 600;
  int evict_after_ms = 2500;
  int barrier_timeout_ms = 2000;
  int reduce_timeout_ms = 3000;
  int commit_timeout_ms = 1500;
  int dial_timeout_ms = 1000;
  uint32_t max_restarts = 4;
  size_t chunk_size_bytes = 1 << 20;
};

struct TrafficSnapshot {
  uint64_t reduce_data_sent = 0;
  uint64_t reduce_data_received = 0;
  uint64_t reduce_wire_sent = 0;
  uint64_t reduce_wire_received = 0;
  uint64_t control_sent = 0;
  uint64_t control_received = 0;
  uint64_t heartbeat_sent = 0;
  uint64_t heartbeat_received = 0;
};

/// One peer process: listener + server loop, replicated store, failure
/// detector, barrier state machine and reduce data plane. The engine
/// drives rounds from its own thread through SocketCollective.
class Node {
 public:
  explicit Node(const NodeOptions& options);
  ~Node();

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  /// Bootstrap a new run (no rendezvous) or register with any live peer.
  /// Returns the membership snapshot after registration.
  Membership join(const std::optional<Address>& rendezvous);

  void leave();            // graceful: broadcast LEAVE, stop threads
  void shutdown_abrupt();  // crash simulation: drop everything silently

  PeerId id() const { return self_id_; }
  Address address() const;
  const NodeOptions& options() const { return options_; }
  Membership membership() const;
  TrafficSnapshot traffic() const;

  // Replicated key-value store.
  void store_put(const std::string& key, std::vector<uint8_t> value);
  std::optional<std::vector<uint8_t>> store_get_local(
      const std::string& key) const;
  std::optional<std::vector<uint8_t>> store_get_remote(
      const Address& peer, const std::string& key);
  /// Serve computed values (e.g. current weights) for keys not in the
  /// replicated map.
  void set_dynamic_provider(
      std::function<std::optional<std::vector<uint8_t>>(const std::string&)>
          provider);

  /// Contributor agreement for one outer epoch; identical set on every
  /// peer that returns. Standalone form of the round barrier.
  std::vector<PeerId> barrier(uint64_t outer_epoch);

  /// Full fault-tolerant round; used via SocketCollective.
  PseudoGradient all_reduce_avg(const PseudoGradient& local,
                                ReduceReport* report,
                                const std::function<void(const char*)>& hook);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  NodeOptions options_;
  PeerId self_id_;
};

/// Engine-facing adapter over a joined Node.
class SocketCollective final : public Collective {
 public:
  explicit SocketCollective(Node& node) : node_(node) {}

  size_t world_size() const override;
  PseudoGradient all_reduce_avg(const PseudoGradient& local,
                                ReduceReport* report) override;

  /// Test hook invoked at protocol stage boundaries ("barrier",
  /// "scatter", "fold", "gather", "commit"); may throw to simulate a
  /// crash at that point.
  void set_stage_hook(std::function<void(const char*)> hook) {
    hook_ = std::move(hook);
  }

 private:
  Node& node_;
  std::function<void(const char*)> hook_;
};

}  // namespace diloco
