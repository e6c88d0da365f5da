// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/collective.hpp"

#include <poll.h>
#include <unistd.h>

#include <algorithm>
#include <cassert>
#include <charconv>
#include <chrono>
#include <cstring>
#include <random>

#include <json.hpp>

#include "diloco/fp16.hpp"
#include "diloco/rng.hpp"

namespace diloco {

namespace {

using nlohmann::json;
using SteadyClock = std::chrono::steady_clock;

int64_t steady_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             SteadyClock::now().time_since_epoch())
      .count();
}

std::string to_hex(std::span<const uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xF]);
  }
  return out;
}

std::vector<uint8_t> from_hex(const std::string& hex) {
  if (hex.size() % 2 != 0) {
    throw SerializationError("odd hex string length");
  }
  auto nibble = [](char c) -> uint8_t {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw SerializationError("bad hex digit");
  };
  std::vector<uint8_t> out(hex.size() / 2);
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<uint8_t>((nibble(hex[2 * i]) << 4) |
                                  nibble(hex[2 * i + 1]));
  }
  return out;
}

// Chunk segments reuse the tensor-core header layout (count=1 | name |
// offset | length | scalars) with the element offset kept global.
std::vector<uint8_t> encode_chunk_segment(const std::string& name,
                                          uint64_t offset, uint64_t length,
                                          std::span<const uint8_t> scalars) {
  std::vector<uint8_t> out;
  out.reserve(32 + name.size() + scalars.size());
  auto put_u64 = [&out](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
  };
  put_u64(1);
  put_u64(name.size());
  out.insert(out.end(), name.begin(), name.end());
  put_u64(offset);
  put_u64(length);
  out.insert(out.end(), scalars.begin(), scalars.end());
  return out;
}

struct ChunkSegment {
  std::string name;
  uint64_t offset = 0;
  uint64_t length = 0;
  std::span<const uint8_t> scalars;
};

ChunkSegment decode_chunk_segment(std::span<const uint8_t> in) {
  size_t cursor = 0;
  auto get_u64 = [&in, &cursor]() {
    if (cursor + 8 > in.size()) {
      throw SerializationError("truncated chunk segment");
    }
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(in[cursor + i]) << (8 * i);
    }
    cursor += 8;
    return v;
  };
  if (get_u64() != 1) {
    throw SerializationError("chunk segment must hold exactly one segment");
  }
  ChunkSegment seg;
  const uint64_t name_len = get_u64();
  if (cursor + name_len > in.size()) {
    throw SerializationError("truncated chunk segment name");
  }
  seg.name.assign(reinterpret_cast<const char*>(in.data() + cursor), name_len);
  cursor += name_len;
  seg.offset = get_u64();
  seg.length = get_u64();
  seg.scalars = in.subspan(cursor);
  return seg;
}

// Segment names tag the round: "a<attempt>.p<partition>.f<owner-hex>".
std::string chunk_name(uint32_t attempt, uint32_t partition,
                       const PeerId& from) {
  return "a" + std::to_string(attempt) + ".p" + std::to_string(partition) +
         ".f" + from.hex();
}

struct ChunkTag {
  uint32_t attempt = 0;
  uint32_t partition = 0;
  PeerId from;
};

std::optional<ChunkTag> parse_chunk_name(const std::string& name) {
  ChunkTag tag;
  if (name.empty() || name[0] != 'a') {
    return std::nullopt;
  }
  const size_t p = name.find(".p");
  const size_t f = name.find(".f");
  if (p == std::string::npos || f == std::string::npos || f < p) {
    return std::nullopt;
  }
  try {
    tag.attempt = static_cast<uint32_t>(std::stoul(name.substr(1, p - 1)));
    tag.partition =
        static_cast<uint32_t>(std::stoul(name.substr(p + 2, f - p - 2)));
    tag.from = PeerId::from_hex(name.substr(f + 2));
  } catch (const std::exception&) {
    return std::nullopt;
  }
  return tag;
}

json peer_to_json(const PeerInfo& peer) {
  return json{{"id", peer.id.hex()},
              {"host", peer.address.host},
              {"port", peer.address.port},
              {"status", to_string(peer.status)}};
}

PeerStatus status_from_string(const std::string& s) {
  if (s == "joining") return PeerStatus::joining;
  if (s == "live") return PeerStatus::live;
  if (s == "suspected") return PeerStatus::suspected;
  return PeerStatus::left;
}

PeerInfo peer_from_json(const json& j, int64_t now_ms) {
  PeerInfo peer;
  peer.id = PeerId::from_hex(j.at("id").get<std::string>());
  peer.address.host = j.at("host").get<std::string>();
  peer.address.port = j.at("port").get<uint16_t>();
  peer.status = status_from_string(j.at("status").get<std::string>());
  // Heartbeat stamps are local-clock values; a freshly adopted view
  // restarts the failure detector locally.
  peer.last_heartbeat_ms = now_ms;
  return peer;
}

WireMessage json_message(MsgType type, const json& j) {
  WireMessage message;
  message.type = type;
  const std::string text = j.dump();
  message.payload.assign(text.begin(), text.end());
  return message;
}

json parse_json_payload(const WireMessage& message) {
  return json::parse(std::string(message.payload.begin(),
                                 message.payload.end()));
}

uint64_t wire_size(const WireMessage& message) {
  return kFrameHeaderBytes + message.payload.size();
}

}  // namespace

// ---------------------------------------------------------------------------
// PeerId / Membership / heartbeat_tick
// ---------------------------------------------------------------------------

PeerId PeerId::random() {
  static std::atomic<uint64_t> counter{0};
  std::random_device rd;
  const uint64_t a = (static_cast<uint64_t>(rd()) << 32) ^ rd();
  const uint64_t b = (static_cast<uint64_t>(rd()) << 32) ^ rd();
  const uint64_t salt = detail::splitmix64(
      static_cast<uint64_t>(steady_ms()) ^
      (counter.fetch_add(1) << 32) ^ static_cast<uint64_t>(::getpid()));
  return PeerId{a ^ detail::splitmix64(salt), b ^ salt};
}

std::string PeerId::hex() const {
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx",
                static_cast<unsigned long long>(hi),
                static_cast<unsigned long long>(lo));
  return std::string(buf, 32);
}

PeerId PeerId::from_hex(const std::string& hex) {
  if (hex.size() != 32) {
    throw SerializationError("peer id must be 32 hex digits");
  }
  PeerId id;
  auto parse_half = [&hex](size_t pos) {
    uint64_t v = 0;
    const auto result =
        std::from_chars(hex.data() + pos, hex.data() + pos + 16, v, 16);
    if (result.ec != std::errc()) {
      throw SerializationError("bad peer id hex");
    }
    return v;
  };
  id.hi = parse_half(0);
  id.lo = parse_half(16);
  return id;
}

std::string to_string(PeerStatus status) {
  switch (status) {
    case PeerStatus::joining: return "joining";
    case PeerStatus::live: return "live";
    case PeerStatus::suspected: return "suspected";
    case PeerStatus::left: return "left";
  }
  return "left";
}

const PeerInfo* Membership::find(const PeerId& id) const {
  for (const PeerInfo& peer : peers) {
    if (peer.id == id) {
      return &peer;
    }
  }
  return nullptr;
}

PeerInfo* Membership::find(const PeerId& id) {
  for (PeerInfo& peer : peers) {
    if (peer.id == id) {
      return &peer;
    }
  }
  return nullptr;
}

void Membership::upsert(PeerInfo info) {
  if (PeerInfo* existing = find(info.id)) {
    *existing = std::move(info);
    return;
  }
  peers.push_back(std::move(info));
  std::sort(peers.begin(), peers.end(),
            [](const PeerInfo& a, const PeerInfo& b) { return a.id < b.id; });
}

bool Membership::erase(const PeerId& id) {
  const size_t before = peers.size();
  peers.erase(std::remove_if(peers.begin(), peers.end(),
                             [&id](const PeerInfo& p) { return p.id == id; }),
              peers.end());
  return peers.size() != before;
}

std::vector<PeerId> Membership::live_ids() const {
  std::vector<PeerId> ids;
  for (const PeerInfo& peer : peers) {
    if (peer.status == PeerStatus::live) {
      ids.push_back(peer.id);
    }
  }
  return ids;
}

size_t Membership::live_count() const {
  return live_ids().size();
}

Membership heartbeat_tick(const Membership& membership, int64_t now_ms,
                          int64_t suspect_after_ms, int64_t evict_after_ms) {
  Membership next = membership;
  bool changed = false;
  std::vector<PeerId> evicted;
  for (PeerInfo& peer : next.peers) {
    const int64_t silent = now_ms - peer.last_heartbeat_ms;
    if (silent > evict_after_ms &&
        (peer.status == PeerStatus::live ||
         peer.status == PeerStatus::suspected ||
         peer.status == PeerStatus::joining)) {
      evicted.push_back(peer.id);
      changed = true;
    } else if (peer.status == PeerStatus::live && silent > suspect_after_ms) {
      peer.status = PeerStatus::suspected;
      changed = true;
    } else if (peer.status == PeerStatus::suspected &&
               silent <= suspect_after_ms) {
      peer.status = PeerStatus::live;  // heartbeats resumed
      changed = true;
    }
  }
  for (const PeerId& id : evicted) {
    next.erase(id);
  }
  if (changed) {
    next.epoch += 1;
  }
  return next;
}

// ---------------------------------------------------------------------------
// Node implementation
// ---------------------------------------------------------------------------

namespace {

struct LocalWaiter {
  std::mutex mutex;
  std::condition_variable cv;
  bool ready = false;
  json reply;
};

// Either a socket to answer on or an in-process waiter (the coordinator's
// own engine thread goes through the same state machine). `seq` is echoed
// so a requester that timed out and reused the connection can discard
// stale replies.
struct ParkedReply {
  std::shared_ptr<Connection> conn;
  std::shared_ptr<LocalWaiter> local;
  uint64_t seq = 0;
};

struct AttemptState {
  bool resolved = false;
  bool committed = false;
  bool aborted = false;
  std::set<PeerId> checked_in;
  std::set<PeerId> reported_suspects;
  std::set<PeerId> done;
  std::vector<PeerId> contributors;
  std::vector<ParkedReply> resolve_waiters;
  std::vector<ParkedReply> commit_waiters;
  int64_t resolve_deadline_ms = 0;
};

struct EpochBarrier {
  uint32_t max_attempt = 0;
  std::map<uint32_t, AttemptState> attempts;
};

struct ChunkKey {
  uint64_t epoch = 0;
  uint32_t attempt = 0;
  bool gather = false;
  uint32_t partition = 0;
  PeerId from;

  auto operator<=>(const ChunkKey&) const = default;
};

struct ChunkPiece {
  uint64_t offset = 0;
  std::vector<uint8_t> bytes;
  uint64_t elems = 0;
};

struct ChunkBuf {
  std::vector<ChunkPiece> pieces;
  uint64_t received_elems = 0;
};

}  // namespace

struct Node::Impl {
  explicit Impl(const NodeOptions& opts, PeerId self)
      : options(opts),
        self_id(self),
        engine_pool(opts.dial_timeout_ms),
        background_pool(opts.dial_timeout_ms) {}

  NodeOptions options;
  PeerId self_id;
  std::unique_ptr<Listener> listener;
  Address self_address;

  mutable std::mutex mutex;
  Membership membership;
  bool joined = false;
  bool stopping = false;
  uint64_t rounds_started = 0;

  // Replicated store: key -> (version, value).
  std::map<std::string, std::pair<uint64_t, std::vector<uint8_t>>> store;
  uint64_t store_version = 0;
  std::function<std::optional<std::vector<uint8_t>>(const std::string&)>
      dynamic_provider;

  // Barrier state machine (server side), keyed by outer epoch.
  std::map<uint64_t, EpochBarrier> barriers;
  std::map<uint64_t, uint32_t> committed_rounds;

  // Reduce inbox.
  std::map<ChunkKey, ChunkBuf> inbox;
  std::condition_variable inbox_cv;

  // Traffic counters.
  std::atomic<uint64_t> reduce_data_sent{0}, reduce_data_recv{0};
  std::atomic<uint64_t> reduce_wire_sent{0}, reduce_wire_recv{0};
  std::atomic<uint64_t> control_sent{0}, control_recv{0};
  std::atomic<uint64_t> heartbeat_sent{0}, heartbeat_recv{0};

  ConnPool engine_pool;
  ConnPool background_pool;
  std::thread server_thread;
  std::thread heartbeat_thread;
  std::atomic<bool> stop_flag{false};
  std::atomic<bool> membership_dirty{false};

  // --- helpers ------------------------------------------------------------

  void count_sent(const WireMessage& message) {
    const uint64_t bytes = wire_size(message);
    switch (message.type) {
      case MsgType::reduce_chunk:
      case MsgType::reduce_result:
        reduce_wire_sent += bytes;
        break;
      case MsgType::heartbeat:
        heartbeat_sent += bytes;
        break;
      default:
        control_sent += bytes;
    }
  }

  void count_received(const WireMessage& message) {
    const uint64_t bytes = wire_size(message);
    switch (message.type) {
      case MsgType::reduce_chunk:
      case MsgType::reduce_result:
        reduce_wire_recv += bytes;
        break;
      case MsgType::heartbeat:
        heartbeat_recv += bytes;
        break;
      default:
        control_recv += bytes;
    }
  }

  bool send_to(ConnPool& pool, const Address& address,
               const WireMessage& message) {
    try {
      pool.get(address)->send(message);
      count_sent(message);
      return true;
    } catch (const Error&) {
      pool.invalidate(address);
      return false;
    }
  }

  std::vector<PeerInfo> known_peers_snapshot() {
    std::lock_guard lock(mutex);
    std::vector<PeerInfo> peers;
    for (const PeerInfo& peer : membership.peers) {
      if (peer.id != self_id) {
        peers.push_back(peer);
      }
    }
    return peers;
  }

  // Keep the rendezvous registration key in sync with the local view.
  void refresh_peers_key_locked() {
    json peers = json::array();
    for (const PeerInfo& peer : membership.peers) {
      peers.push_back(peer_to_json(peer));
    }
    const std::string text = peers.dump();
    store["run/" + options.run_id + "/peers"] = {++store_version,
        std::vector<uint8_t>(text.begin(), text.end())};
  }

  json membership_json_locked() {
    json peers = json::array();
    for (const PeerInfo& peer : membership.peers) {
      peers.push_back(peer_to_json(peer));
    }
    return json{{"run", options.run_id},
                {"epoch", membership.epoch},
                {"sender", self_id.hex()},
                {"peers", peers}};
  }

  void broadcast_membership() {
    json j;
    std::vector<PeerInfo> targets;
    {
      std::lock_guard lock(mutex);
      refresh_peers_key_locked();
      j = membership_json_locked();
      for (const PeerInfo& peer : membership.peers) {
        if (peer.id != self_id) {
          targets.push_back(peer);
        }
      }
    }
    const WireMessage message = json_message(MsgType::peer_set, j);
    for (const PeerInfo& peer : targets) {
      send_to(background_pool, peer.address, message);
    }
  }

  void adopt_membership(const json& j) {
    const int64_t now = steady_ms();
    bool changed = false;
    {
      std::lock_guard lock(mutex);
      const uint64_t remote_epoch = j.at("epoch").get<uint64_t>();
      const PeerId sender = PeerId::from_hex(j.at("sender").get<std::string>());
      const bool adopt =
          remote_epoch > membership.epoch ||
          (remote_epoch == membership.epoch && sender < self_id);
      if (!adopt) {
        return;
      }
      Membership next;
      next.epoch = remote_epoch;
      next.quorum_min = membership.quorum_min;
      for (const json& pj : j.at("peers")) {
        PeerInfo peer = peer_from_json(pj, now);
        // Keep the local silence clock for peers we already track; resetting
        // it on every adopted view would let a dead peer dodge eviction.
        if (const PeerInfo* known = membership.find(peer.id)) {
          peer.last_heartbeat_ms = known->last_heartbeat_ms;
        }
        next.upsert(peer);
      }
      // Never lose ourselves to a stale view.
      if (!next.find(self_id)) {
        PeerInfo self;
        self.id = self_id;
        self.address = self_address;
        self.status = PeerStatus::live;
        self.last_heartbeat_ms = now;
        next.upsert(self);
      }
      changed = true;
      membership = std::move(next);
      refresh_peers_key_locked();
    }
    (void)changed;
  }

  // --- store ---------------------------------------------------------------

  void apply_store_put(const std::string& key, uint64_t version,
                       std::vector<uint8_t> value) {
    std::lock_guard lock(mutex);
    auto it = store.find(key);
    if (it == store.end() || it->second.first < version) {
      store[key] = {version, std::move(value)};
      store_version = std::max(store_version, version);
    }
  }

  // --- barrier state machine (single logical owner: whoever holds mutex) ---

  struct Replies {
    std::vector<std::pair<ParkedReply, json>> list;

    void add(ParkedReply to, json j) {
      list.emplace_back(std::move(to), std::move(j));
    }
  };

  void deliver(Replies& replies) {
    for (auto& [to, j] : replies.list) {
      j["seq"] = to.seq;
      if (to.local) {
        {
          std::lock_guard lk(to.local->mutex);
          to.local->reply = std::move(j);
          to.local->ready = true;
        }
        to.local->cv.notify_all();
      } else if (to.conn && !to.conn->closed()) {
        try {
          const WireMessage message = json_message(MsgType::barrier, j);
          to.conn->send(message);
          count_sent(message);
        } catch (const Error&) {
          // Requester vanished; nothing to do.
        }
      }
    }
    replies.list.clear();
  }

  void abort_attempt_locked(AttemptState& state, uint32_t retry_attempt,
                            Replies& replies) {
    if (state.committed) {
      return;
    }
    state.aborted = true;
    for (ParkedReply& waiter : state.resolve_waiters) {
      replies.add(std::move(waiter),
                  json{{"k", "retry"}, {"attempt", retry_attempt}});
    }
    state.resolve_waiters.clear();
    for (ParkedReply& waiter : state.commit_waiters) {
      replies.add(std::move(waiter),
                  json{{"k", "commit"}, {"ok", false},
                       {"attempt", retry_attempt}});
    }
    state.commit_waiters.clear();
  }

  void resolve_attempt_locked(uint64_t epoch, AttemptState& state,
                              Replies& replies) {
    state.resolved = true;
    state.contributors.assign(state.checked_in.begin(),
                              state.checked_in.end());
    rounds_started += 1;
    json contributors = json::array();
    for (const PeerId& id : state.contributors) {
      contributors.push_back(id.hex());
    }
    const json reply{{"k", "resolve"},
                     {"ok", true},
                     {"epoch", epoch},
                     {"contributors", contributors}};
    for (ParkedReply& waiter : state.resolve_waiters) {
      replies.add(std::move(waiter), reply);
    }
    state.resolve_waiters.clear();
    // On-ramp: joiners become eligible from the next round on.
    bool promoted = false;
    for (PeerInfo& peer : membership.peers) {
      if (peer.status == PeerStatus::joining) {
        peer.status = PeerStatus::live;
        promoted = true;
      }
    }
    if (promoted) {
      membership.epoch += 1;
      refresh_peers_key_locked();
      membership_dirty.store(true);  // server loop broadcasts
    }
  }

  void try_resolve_locked(uint64_t epoch, AttemptState& state,
                          Replies& replies) {
    if (state.resolved || state.aborted) {
      return;
    }
    if (!state.checked_in.count(self_id)) {
      return;  // we are alive by definition; never resolve without self
    }
    // Expected: live peers, minus anyone reported unreachable this attempt.
    for (const PeerInfo& peer : membership.peers) {
      if (peer.status != PeerStatus::live) {
        continue;
      }
      if (state.reported_suspects.count(peer.id)) {
        continue;
      }
      if (!state.checked_in.count(peer.id)) {
        return;  // still waiting; the deadline handles the dead
      }
    }
    resolve_attempt_locked(epoch, state, replies);
  }

  void barrier_handle_checkin(uint64_t epoch, uint32_t attempt,
                              const PeerId& peer,
                              const std::vector<PeerId>& suspects,
                              ParkedReply reply) {
    Replies replies;
    {
      std::lock_guard lock(mutex);
      EpochBarrier& eb = barriers[epoch];
      if (committed_rounds.count(epoch)) {
        replies.add(std::move(reply),
                    json{{"k", "abort"}, {"reason", "round_closed"}});
      } else if (attempt < eb.max_attempt) {
        replies.add(std::move(reply),
                    json{{"k", "retry"}, {"attempt", eb.max_attempt}});
      } else {
        if (attempt > eb.max_attempt) {
          for (auto& [a, st] : eb.attempts) {
            if (a < attempt) {
              abort_attempt_locked(st, attempt, replies);
            }
          }
          eb.max_attempt = attempt;
        }
        AttemptState& state = eb.attempts[attempt];
        if (state.resolved) {
          const bool in_round =
              std::find(state.contributors.begin(), state.contributors.end(),
                        peer) != state.contributors.end();
          if (in_round) {
            json contributors = json::array();
            for (const PeerId& id : state.contributors) {
              contributors.push_back(id.hex());
            }
            replies.add(std::move(reply),
                        json{{"k", "resolve"}, {"ok", true}, {"epoch", epoch},
                             {"contributors", contributors}});
          } else {
            replies.add(std::move(reply),
                        json{{"k", "abort"}, {"reason", "round_closed"}});
          }
        } else {
          state.checked_in.insert(peer);
          for (const PeerId& s : suspects) {
            state.reported_suspects.insert(s);
          }
          state.resolve_waiters.push_back(std::move(reply));
          if (state.resolve_deadline_ms == 0) {
            state.resolve_deadline_ms =
                steady_ms() + options.barrier_timeout_ms;
          }
          try_resolve_locked(epoch, state, replies);
        }
      }
    }
    deliver(replies);
  }

  void barrier_handle_done(uint64_t epoch, uint32_t attempt,
                           const PeerId& peer, ParkedReply reply) {
    Replies replies;
    {
      std::lock_guard lock(mutex);
      EpochBarrier& eb = barriers[epoch];
      AttemptState& state = eb.attempts[attempt];
      if (state.committed) {
        replies.add(std::move(reply), json{{"k", "commit"}, {"ok", true}});
      } else if (state.aborted || attempt < eb.max_attempt) {
        replies.add(std::move(reply),
                    json{{"k", "commit"}, {"ok", false},
                         {"attempt", eb.max_attempt}});
      } else {
        state.done.insert(peer);
        state.commit_waiters.push_back(std::move(reply));
        if (state.resolved &&
            std::all_of(state.contributors.begin(), state.contributors.end(),
                        [&state](const PeerId& id) {
                          return state.done.count(id) > 0;
                        })) {
          state.committed = true;
          committed_rounds[epoch] = attempt;
          for (ParkedReply& waiter : state.commit_waiters) {
            replies.add(std::move(waiter),
                        json{{"k", "commit"}, {"ok", true}});
          }
          state.commit_waiters.clear();
          // Old rounds are settled; trim the maps.
          while (barriers.size() > 8) {
            barriers.erase(barriers.begin());
          }
          while (committed_rounds.size() > 8) {
            committed_rounds.erase(committed_rounds.begin());
          }
        }
      }
    }
    deliver(replies);
  }

  json barrier_handle_probe(uint64_t epoch, uint32_t attempt) {
    std::lock_guard lock(mutex);
    const auto it = committed_rounds.find(epoch);
    const bool committed = it != committed_rounds.end() &&
                           it->second == attempt;
    return json{{"k", "probe_resp"}, {"committed", committed}};
  }

  void barrier_deadlines(int64_t now) {
    Replies replies;
    {
      std::lock_guard lock(mutex);
      for (auto& [epoch, eb] : barriers) {
        for (auto& [attempt, state] : eb.attempts) {
          if (state.resolved || state.aborted ||
              state.resolve_deadline_ms == 0 ||
              now < state.resolve_deadline_ms) {
            continue;
          }
          if (!state.checked_in.count(self_id)) {
            // Our own engine has not reached the barrier yet; it is alive
            // by construction, so wait for it rather than excluding it.
            state.resolve_deadline_ms = now + options.barrier_timeout_ms;
            continue;
          }
          if (state.checked_in.size() >= membership.quorum_min) {
            resolve_attempt_locked(epoch, state, replies);
          } else {
            state.aborted = true;
            for (ParkedReply& waiter : state.resolve_waiters) {
              replies.add(std::move(waiter),
                          json{{"k", "abort"}, {"reason", "quorum"}});
            }
            state.resolve_waiters.clear();
          }
        }
      }
    }
    deliver(replies);
  }

  int64_t next_barrier_deadline() {
    std::lock_guard lock(mutex);
    int64_t next = INT64_MAX;
    for (auto& [epoch, eb] : barriers) {
      for (auto& [attempt, state] : eb.attempts) {
        if (!state.resolved && !state.aborted &&
            state.resolve_deadline_ms != 0) {
          next = std::min(next, state.resolve_deadline_ms);
        }
      }
    }
    return next;
  }

  // --- message handling (server thread) ------------------------------------

  void handle_message(const std::shared_ptr<Connection>& conn,
                      WireMessage&& message) {
    count_received(message);
    switch (message.type) {
      case MsgType::hello:
        handle_hello(conn, parse_json_payload(message));
        break;
      case MsgType::peer_set:
        adopt_membership(parse_json_payload(message));
        break;
      case MsgType::heartbeat:
        handle_heartbeat(parse_json_payload(message));
        break;
      case MsgType::barrier:
        handle_barrier_message(conn, parse_json_payload(message));
        break;
      case MsgType::reduce_chunk:
      case MsgType::reduce_result:
        handle_reduce_chunk(message);
        break;
      case MsgType::leave:
        handle_leave(parse_json_payload(message));
        break;
      case MsgType::store_put: {
        const json j = parse_json_payload(message);
        apply_store_put(j.at("key").get<std::string>(),
                        j.at("version").get<uint64_t>(),
                        from_hex(j.at("value").get<std::string>()));
        break;
      }
      case MsgType::store_get:
        handle_store_get(conn, parse_json_payload(message));
        break;
    }
  }

  void handle_hello(const std::shared_ptr<Connection>& conn, const json& j) {
    const std::string run = j.at("run").get<std::string>();
    json reply;
    if (run != options.run_id) {
      reply = {{"k", "welcome"}, {"ok", false},
               {"reason", "run_id mismatch: serving '" + options.run_id +
                              "', got '" + run + "'"}};
    } else {
      const int64_t now = steady_ms();
      PeerInfo joiner;
      joiner.id = PeerId::from_hex(j.at("id").get<std::string>());
      joiner.address.host = j.at("host").get<std::string>();
      joiner.address.port = j.at("port").get<uint16_t>();
      joiner.last_heartbeat_ms = now;
      json store_snapshot = json::object();
      {
        std::lock_guard lock(mutex);
        // Mid-run joiners on-ramp at the next outer round; before any
        // round everyone starts live.
        joiner.status = rounds_started > 0 ? PeerStatus::joining
                                           : PeerStatus::live;
        membership.upsert(joiner);
        membership.epoch += 1;
        refresh_peers_key_locked();
        for (const auto& [key, entry] : store) {
          store_snapshot[key] = {{"version", entry.first},
                                 {"value", to_hex(entry.second)}};
        }
        reply = {{"k", "welcome"},
                 {"ok", true},
                 {"membership", membership_json_locked()},
                 {"store", store_snapshot}};
      }
      broadcast_membership();
    }
    try {
      const WireMessage message = json_message(MsgType::peer_set, reply);
      conn->send(message);
      count_sent(message);
    } catch (const Error&) {
    }
  }

  void handle_heartbeat(const json& j) {
    if (j.at("run").get<std::string>() != options.run_id) {
      return;
    }
    const PeerId from = PeerId::from_hex(j.at("from").get<std::string>());
    std::lock_guard lock(mutex);
    if (PeerInfo* peer = membership.find(from)) {
      peer->last_heartbeat_ms = steady_ms();
    }
  }

  void handle_leave(const json& j) {
    const PeerId from = PeerId::from_hex(j.at("from").get<std::string>());
    bool changed = false;
    {
      std::lock_guard lock(mutex);
      changed = membership.erase(from);
      if (changed) {
        membership.epoch += 1;
        refresh_peers_key_locked();
      }
    }
    if (changed) {
      broadcast_membership();
    }
  }

  void handle_store_get(const std::shared_ptr<Connection>& conn,
                        const json& j) {
    const std::string key = j.at("key").get<std::string>();
    json reply{{"k", "store_value"}, {"found", false}};
    std::optional<std::vector<uint8_t>> dynamic;
    {
      std::lock_guard lock(mutex);
      const auto it = store.find(key);
      if (it != store.end()) {
        reply["found"] = true;
        reply["value"] = to_hex(it->second.second);
      }
    }
    if (!reply["found"].get<bool>() && dynamic_provider) {
      dynamic = dynamic_provider(key);
      if (dynamic) {
        reply["found"] = true;
        reply["value"] = to_hex(*dynamic);
      }
    }
    try {
      const WireMessage message = json_message(MsgType::store_put, reply);
      conn->send(message);
      count_sent(message);
    } catch (const Error&) {
    }
  }

  void handle_barrier_message(const std::shared_ptr<Connection>& conn,
                              const json& j) {
    const std::string kind = j.at("k").get<std::string>();
    const uint64_t epoch = j.at("epoch").get<uint64_t>();
    const uint32_t attempt = j.at("attempt").get<uint32_t>();
    const uint64_t seq = j.value("seq", 0ull);
    if (kind == "checkin") {
      std::vector<PeerId> suspects;
      for (const json& s : j.value("suspects", json::array())) {
        suspects.push_back(PeerId::from_hex(s.get<std::string>()));
      }
      barrier_handle_checkin(epoch, attempt,
                             PeerId::from_hex(j.at("peer").get<std::string>()),
                             suspects, ParkedReply{conn, nullptr, seq});
    } else if (kind == "done") {
      barrier_handle_done(epoch, attempt,
                          PeerId::from_hex(j.at("peer").get<std::string>()),
                          ParkedReply{conn, nullptr, seq});
    } else if (kind == "probe") {
      json reply = barrier_handle_probe(epoch, attempt);
      reply["seq"] = seq;
      try {
        const WireMessage message = json_message(MsgType::barrier, reply);
        conn->send(message);
        count_sent(message);
      } catch (const Error&) {
      }
    }
  }

  void handle_reduce_chunk(const WireMessage& message) {
    std::span<const uint8_t> segment_bytes;
    const ReduceChunkHeader header =
        decode_reduce_payload(message.payload, segment_bytes);
    const ChunkSegment segment = decode_chunk_segment(segment_bytes);
    const auto tag = parse_chunk_name(segment.name);
    if (!tag) {
      return;  // unknown producer; drop
    }
    const uint64_t width = header.precision == 1 ? 2 : 4;
    if (segment.scalars.size() != segment.length * width) {
      return;  // malformed; drop rather than poison the round
    }
    reduce_data_recv += segment.scalars.size();
    ChunkKey key;
    key.epoch = header.outer_epoch;
    key.attempt = tag->attempt;
    key.gather = message.type == MsgType::reduce_result;
    key.partition = tag->partition;
    key.from = tag->from;
    {
      std::lock_guard lock(mutex);
      ChunkBuf& buf = inbox[key];
      buf.pieces.push_back(ChunkPiece{
          segment.offset,
          std::vector<uint8_t>(segment.scalars.begin(), segment.scalars.end()),
          segment.length});
      buf.received_elems += segment.length;
    }
    inbox_cv.notify_all();
  }

  // --- server / heartbeat threads ------------------------------------------

  void server_loop() {
    std::vector<std::shared_ptr<Connection>> conns;
    while (!stop_flag.load()) {
      std::vector<pollfd> fds;
      fds.push_back(pollfd{listener->fd(), POLLIN, 0});
      for (const auto& conn : conns) {
        fds.push_back(pollfd{conn->fd(), POLLIN, 0});
      }
      int timeout = 50;
      const int64_t deadline = next_barrier_deadline();
      if (deadline != INT64_MAX) {
        timeout = static_cast<int>(
            std::clamp<int64_t>(deadline - steady_ms(), 1, 50));
      }
      ::poll(fds.data(), fds.size(), timeout);
      if (stop_flag.load()) {
        break;
      }
      if (fds[0].revents & POLLIN) {
        if (auto conn = listener->accept(0)) {
          conns.push_back(std::move(conn));
        }
      }
      for (size_t i = 0; i < conns.size(); ++i) {
        if (!(fds[i + 1].revents & (POLLIN | POLLHUP | POLLERR))) {
          continue;
        }
        std::vector<WireMessage> messages;
        bool alive = true;
        try {
          alive = conns[i]->read_available(messages);
        } catch (const Error&) {
          alive = false;
        }
        for (WireMessage& message : messages) {
          try {
            handle_message(conns[i], std::move(message));
          } catch (const std::exception&) {
            // Malformed payload; keep serving.
          }
        }
        if (!alive) {
          conns[i]->close();
        }
      }
      std::erase_if(conns, [](const auto& c) { return c->closed(); });
      barrier_deadlines(steady_ms());
      if (membership_dirty.exchange(false)) {
        broadcast_membership();
      }
    }
  }

  void heartbeat_loop() {
    while (!stop_flag.load()) {
      std::this_thread::sleep_for(
          std::chrono::milliseconds(options.heartbeat_interval_ms));
      if (stop_flag.load()) {
        break;
      }
      const json j{{"run", options.run_id}, {"from", self_id.hex()}};
      const WireMessage message = json_message(MsgType::heartbeat, j);
      for (const PeerInfo& peer : known_peers_snapshot()) {
        send_to(background_pool, peer.address, message);
      }
      // Failure detector sweep over the local view.
      bool changed = false;
      {
        std::lock_guard lock(mutex);
        if (PeerInfo* self = membership.find(self_id)) {
          self->last_heartbeat_ms = steady_ms();
        }
        Membership next =
            heartbeat_tick(membership, steady_ms(), options.suspect_after_ms,
                           options.evict_after_ms);
        if (next.epoch != membership.epoch) {
          membership = std::move(next);
          refresh_peers_key_locked();
          changed = true;
        }
      }
      if (changed) {
        broadcast_membership();
      }
    }
  }

  // --- engine-side round machinery -----------------------------------------

  struct BarrierOutcome {
    std::vector<PeerId> contributors;
    PeerId coordinator;
    uint32_t attempt = 0;
  };

  std::atomic<uint64_t> request_seq{1};

  json barrier_request(const PeerId& coordinator, json request,
                       int timeout_ms) {
    const uint64_t seq = request_seq.fetch_add(1);
    request["seq"] = seq;
    if (coordinator == self_id) {
      auto waiter = std::make_shared<LocalWaiter>();
      const std::string kind = request.at("k").get<std::string>();
      if (kind == "checkin") {
        std::vector<PeerId> suspects;
        for (const json& s : request.value("suspects", json::array())) {
          suspects.push_back(PeerId::from_hex(s.get<std::string>()));
        }
        barrier_handle_checkin(request.at("epoch").get<uint64_t>(),
                               request.at("attempt").get<uint32_t>(), self_id,
                               suspects, ParkedReply{nullptr, waiter, seq});
      } else if (kind == "done") {
        barrier_handle_done(request.at("epoch").get<uint64_t>(),
                            request.at("attempt").get<uint32_t>(), self_id,
                            ParkedReply{nullptr, waiter, seq});
      } else {
        return barrier_handle_probe(request.at("epoch").get<uint64_t>(),
                                    request.at("attempt").get<uint32_t>());
      }
      std::unique_lock lk(waiter->mutex);
      if (!waiter->cv.wait_for(lk, std::chrono::milliseconds(timeout_ms),
                               [&waiter] { return waiter->ready; })) {
        throw CollectiveError("local barrier wait timed out");
      }
      return waiter->reply;
    }
    Address address;
    {
      std::lock_guard lock(mutex);
      const PeerInfo* peer = membership.find(coordinator);
      if (!peer) {
        throw CollectiveError("coordinator not in membership");
      }
      address = peer->address;
    }
    const auto conn = engine_pool.get(address);
    const WireMessage message = json_message(MsgType::barrier, request);
    conn->send(message);
    count_sent(message);
    // Replies to requests this thread abandoned may still be queued on the
    // shared connection; drop anything whose seq does not match.
    const int64_t deadline = steady_ms() + timeout_ms;
    while (true) {
      const int64_t remaining = deadline - steady_ms();
      if (remaining <= 0) {
        engine_pool.invalidate(address);
        throw CollectiveError("barrier request to " + coordinator.short_hex() +
                              " timed out");
      }
      const auto reply = conn->recv(static_cast<int>(remaining));
      if (!reply) {
        engine_pool.invalidate(address);
        throw CollectiveError("barrier request to " + coordinator.short_hex() +
                              " timed out");
      }
      count_received(*reply);
      json parsed = parse_json_payload(*reply);
      if (parsed.value("seq", 0ull) == seq) {
        return parsed;
      }
    }
  }

  // One check-in round trip; walks coordinator candidates when they die.
  BarrierOutcome run_barrier(uint64_t epoch, uint32_t attempt,
                             std::set<PeerId>& suspects) {
    const int reply_timeout =
        options.barrier_timeout_ms * 2 + options.dial_timeout_ms;
    for (uint32_t hop = 0; hop < options.max_restarts + 2; ++hop) {
      std::vector<PeerId> candidates;
      {
        std::lock_guard lock(mutex);
        for (const PeerInfo& peer : membership.peers) {
          if (peer.status == PeerStatus::live && !suspects.count(peer.id)) {
            candidates.push_back(peer.id);
          }
        }
      }
      if (candidates.empty()) {
        throw QuorumError("no live coordinator candidates");
      }
      const PeerId coordinator = candidates.front();
      json suspects_json = json::array();
      for (const PeerId& s : suspects) {
        suspects_json.push_back(s.hex());
      }
      const json request{{"k", "checkin"}, {"run", options.run_id},
                         {"epoch", epoch},  {"attempt", attempt},
                         {"peer", self_id.hex()},
                         {"suspects", suspects_json}};
      json reply;
      try {
        reply = barrier_request(coordinator, request, reply_timeout);
      } catch (const QuorumError&) {
        throw;
      } catch (const CollectiveError&) {
        suspects.insert(coordinator);
        continue;  // next candidate
      }
      const std::string kind = reply.at("k").get<std::string>();
      if (kind == "resolve") {
        BarrierOutcome outcome;
        outcome.coordinator = coordinator;
        outcome.attempt = attempt;
        for (const json& c : reply.at("contributors")) {
          outcome.contributors.push_back(
              PeerId::from_hex(c.get<std::string>()));
        }
        return outcome;
      }
      if (kind == "retry") {
        attempt = std::max(attempt + 1, reply.at("attempt").get<uint32_t>());
        continue;
      }
      if (kind == "abort") {
        const std::string reason = reply.value("reason", "aborted");
        if (reason == "quorum") {
          throw QuorumError("barrier below quorum");
        }
        throw CollectiveError("barrier aborted: " + reason);
      }
      throw CollectiveError("unexpected barrier reply kind '" + kind + "'");
    }
    throw CollectiveError("barrier retries exhausted");
  }

  std::optional<std::vector<uint8_t>> wait_chunk(const ChunkKey& key,
                                                 uint64_t expected_elems,
                                                 uint64_t width,
                                                 int64_t deadline_ms) {
    std::unique_lock lock(mutex);
    while (true) {
      const auto it = inbox.find(key);
      if (it != inbox.end() && it->second.received_elems >= expected_elems) {
        ChunkBuf buf = std::move(it->second);
        inbox.erase(it);
        lock.unlock();
        std::sort(buf.pieces.begin(), buf.pieces.end(),
                  [](const ChunkPiece& a, const ChunkPiece& b) {
                    return a.offset < b.offset;
                  });
        std::vector<uint8_t> bytes;
        bytes.reserve(expected_elems * width);
        for (const ChunkPiece& piece : buf.pieces) {
          bytes.insert(bytes.end(), piece.bytes.begin(), piece.bytes.end());
        }
        return bytes;
      }
      const int64_t now = steady_ms();
      if (now >= deadline_ms) {
        return std::nullopt;
      }
      inbox_cv.wait_for(lock, std::chrono::milliseconds(
                                  std::min<int64_t>(deadline_ms - now, 100)));
    }
  }

  void gc_inbox(uint64_t epoch, uint32_t up_to_attempt) {
    std::lock_guard lock(mutex);
    std::erase_if(inbox, [epoch, up_to_attempt](const auto& entry) {
      return entry.first.epoch < epoch ||
             (entry.first.epoch == epoch &&
              entry.first.attempt <= up_to_attempt);
    });
  }

  void send_chunk_span(const Address& to, MsgType type, uint64_t epoch,
                       uint32_t attempt, uint32_t partition,
                       const PeerId& from, Precision precision,
                       uint64_t global_offset, std::span<const uint8_t> bytes,
                       uint64_t elems) {
    // Respect the configured chunk size on the wire.
    const uint64_t width = element_width(precision);
    const uint64_t max_elems =
        std::max<uint64_t>(1, options.chunk_size_bytes / width);
    uint32_t chunk_index = 0;
    for (uint64_t start = 0; start < elems; start += max_elems) {
      const uint64_t count = std::min(max_elems, elems - start);
      const std::vector<uint8_t> segment = encode_chunk_segment(
          chunk_name(attempt, partition, from), global_offset + start, count,
          bytes.subspan(start * width, count * width));
      ReduceChunkHeader header;
      header.outer_epoch = epoch;
      header.chunk_index = chunk_index++;
      header.precision = precision == Precision::fp16 ? 1 : 0;
      WireMessage message;
      message.type = type;
      message.payload = encode_reduce_payload(header, segment);
      const auto conn = engine_pool.get(to);
      conn->send(message);
      count_sent(message);
      reduce_data_sent += count * width;
    }
  }

  PseudoGradient all_reduce(const PseudoGradient& local, ReduceReport* report,
                            const std::function<void(const char*)>& hook) {
    const auto wall_start = SteadyClock::now();
    const uint64_t epoch = local.outer_epoch;
    const Precision precision = local.precision;
    const uint64_t width = element_width(precision);
    const size_t n = local.delta.size();
    const TrafficSnapshot before = snapshot();

    // One encode at the source; both the scatter payload and our own fold
    // input come from these bits.
    Fp16Buffer own_fp16;
    std::vector<float> own_decoded;
    if (precision == Precision::fp16) {
      own_fp16 = encode_fp16(local.delta);
      own_decoded.resize(n);
      for (size_t i = 0; i < n; ++i) {
        own_decoded[i] = fp16_decode(own_fp16.bits[i]);
      }
    }

    std::set<PeerId> suspects;
    uint32_t attempt = 0;
    for (uint32_t round_try = 0; round_try <= options.max_restarts;
         ++round_try) {
      hook("barrier");
      BarrierOutcome barrier = run_barrier(epoch, attempt, suspects);
      attempt = barrier.attempt;
      const std::vector<PeerId>& contributors = barrier.contributors;
      if (contributors.size() < options.quorum_min) {
        throw QuorumError("contributor set below quorum");
      }
      const auto self_it =
          std::find(contributors.begin(), contributors.end(), self_id);
      if (self_it == contributors.end()) {
        throw CollectiveError("excluded from round " + std::to_string(epoch));
      }
      const size_t k = contributors.size();
      const size_t rank =
          static_cast<size_t>(self_it - contributors.begin());
      const std::vector<Range> ranges = partition_ranges(n, k);

      std::map<PeerId, Address> addresses;
      {
        std::lock_guard lock(mutex);
        for (const PeerId& id : contributors) {
          if (const PeerInfo* peer = membership.find(id)) {
            addresses[id] = peer->address;
          }
        }
      }

      try {
        hook("scatter");
        // Direct scatter: every foreign partition goes to its owner.
        for (size_t p = 0; p < k; ++p) {
          if (p == rank || ranges[p].length == 0) {
            continue;
          }
          const auto address_it = addresses.find(contributors[p]);
          if (address_it == addresses.end()) {
            throw CollectiveError("missing address for contributor");
          }
          std::span<const uint8_t> bytes;
          if (precision == Precision::fp16) {
            bytes = std::span(
                reinterpret_cast<const uint8_t*>(own_fp16.bits.data()) +
                    ranges[p].offset * 2,
                ranges[p].length * 2);
          } else {
            bytes = std::span(
                reinterpret_cast<const uint8_t*>(local.delta.values().data()) +
                    ranges[p].offset * 4,
                ranges[p].length * 4);
          }
          send_chunk_span(address_it->second, MsgType::reduce_chunk, epoch,
                          attempt, static_cast<uint32_t>(p), self_id,
                          precision, ranges[p].offset, bytes,
                          ranges[p].length);
        }

        // Collect every contribution for our own partition.
        const Range& own_range = ranges[rank];
        std::vector<std::vector<float>> foreign(k);
        const int64_t data_deadline = steady_ms() + options.reduce_timeout_ms;
        for (size_t j = 0; j < k; ++j) {
          if (j == rank || own_range.length == 0) {
            continue;
          }
          ChunkKey key{epoch, attempt, false,
                       static_cast<uint32_t>(rank), contributors[j]};
          auto bytes = wait_chunk(key, own_range.length, width, data_deadline);
          if (!bytes) {
            suspects.insert(contributors[j]);
            throw CollectiveError("scatter timeout");
          }
          foreign[j].resize(own_range.length);
          if (precision == Precision::fp16) {
            const uint16_t* codes =
                reinterpret_cast<const uint16_t*>(bytes->data());
            for (size_t i = 0; i < own_range.length; ++i) {
              foreign[j][i] = fp16_decode(codes[i]);
            }
          } else {
            std::memcpy(foreign[j].data(), bytes->data(),
                        own_range.length * 4);
          }
        }

        hook("fold");
        // FP32 fold over the contributions in peer-sorted order.
        std::vector<float> own_result(own_range.length);
        {
          std::vector<std::span<const float>> slices(k);
          for (size_t j = 0; j < k; ++j) {
            if (j == rank) {
              if (precision == Precision::fp16) {
                slices[j] = std::span(own_decoded.data() + own_range.offset,
                                      own_range.length);
              } else {
                slices[j] =
                    local.delta.values().subspan(own_range.offset,
                                                 own_range.length);
              }
            } else {
              slices[j] = foreign[j];
            }
          }
          fold_mean(slices, own_result);
        }
        // The owner encodes the mean exactly once; everyone, including the
        // owner, consumes the encoded bits.
        std::vector<uint8_t> own_result_bytes(own_range.length * width);
        if (precision == Precision::fp16) {
          uint16_t* codes =
              reinterpret_cast<uint16_t*>(own_result_bytes.data());
          for (size_t i = 0; i < own_range.length; ++i) {
            codes[i] = fp16_encode(own_result[i]);
          }
        } else {
          std::memcpy(own_result_bytes.data(), own_result.data(),
                      own_result_bytes.size());
        }

        hook("gather");
        // Ring relay all-gather of the owner partitions.
        std::vector<std::vector<uint8_t>> partitions(k);
        partitions[rank] = own_result_bytes;
        if (k > 1) {
          const PeerId successor = contributors[(rank + 1) % k];
          const auto succ_it = addresses.find(successor);
          if (succ_it == addresses.end()) {
            throw CollectiveError("missing address for ring successor");
          }
          const Address succ_address = succ_it->second;
          const int64_t gather_deadline =
              steady_ms() + options.reduce_timeout_ms;
          for (size_t s = 0; s + 1 < k; ++s) {
            const size_t send_p = (rank + k - s) % k;
            const size_t recv_p = (rank + k - 1 - s) % k;
            if (ranges[send_p].length > 0) {
              send_chunk_span(succ_address, MsgType::reduce_result, epoch,
                              attempt, static_cast<uint32_t>(send_p),
                              contributors[send_p], precision,
                              ranges[send_p].offset, partitions[send_p],
                              ranges[send_p].length);
            }
            if (ranges[recv_p].length > 0) {
              ChunkKey key{epoch, attempt, true,
                           static_cast<uint32_t>(recv_p),
                           contributors[recv_p]};
              auto bytes = wait_chunk(key, ranges[recv_p].length, width,
                                      gather_deadline);
              if (!bytes) {
                // The ring stalled somewhere upstream; the immediate
                // predecessor is usually alive and merely blocked, so the
                // heartbeat detector gets to name the dead peer instead.
                throw CollectiveError("gather timeout");
              }
              partitions[recv_p] = std::move(*bytes);
            } else {
              partitions[recv_p] = {};
            }
          }
        }

        hook("commit");
        const json done{{"k", "done"}, {"run", options.run_id},
                        {"epoch", epoch}, {"attempt", attempt},
                        {"peer", self_id.hex()}};
        bool committed = false;
        try {
          const json reply = barrier_request(barrier.coordinator, done,
                                             options.commit_timeout_ms);
          if (reply.at("k").get<std::string>() == "commit" &&
              reply.at("ok").get<bool>()) {
            committed = true;
          }
        } catch (const CollectiveError&) {
          // Coordinator unreachable; ask the others whether the round
          // committed. Everyone who finished the data phase holds the
          // same bytes, so a positive probe is as good as a commit.
          for (const PeerId& id : contributors) {
            if (id == self_id) {
              continue;
            }
            try {
              const json probe{{"k", "probe"}, {"run", options.run_id},
                               {"epoch", epoch}, {"attempt", attempt}};
              const json reply = barrier_request(id, probe, 500);
              if (reply.value("committed", false)) {
                committed = true;
                break;
              }
            } catch (const CollectiveError&) {
            }
          }
        }
        if (!committed) {
          gc_inbox(epoch, attempt);
          attempt += 1;
          continue;
        }

        {
          // Any committed round means training is in progress; joiners
          // from here on must on-ramp at a boundary.
          std::lock_guard lock(mutex);
          rounds_started += 1;
        }

        // Assemble the reduced vector from the owner-encoded partitions.
        std::vector<float> result(n);
        for (size_t p = 0; p < k; ++p) {
          const Range& range = ranges[p];
          if (range.length == 0) {
            continue;
          }
          if (precision == Precision::fp16) {
            const uint16_t* codes =
                reinterpret_cast<const uint16_t*>(partitions[p].data());
            for (size_t i = 0; i < range.length; ++i) {
              result[range.offset + i] = fp16_decode(codes[i]);
            }
          } else {
            std::memcpy(result.data() + range.offset, partitions[p].data(),
                        range.length * 4);
          }
        }
        gc_inbox(epoch, attempt);

        if (report) {
          const TrafficSnapshot after = snapshot();
          report->outer_epoch = epoch;
          report->contributors = k;
          report->attempts = attempt + 1;
          report->data_bytes_sent =
              after.reduce_data_sent - before.reduce_data_sent;
          report->data_bytes_received =
              after.reduce_data_received - before.reduce_data_received;
          report->wire_bytes_sent =
              after.reduce_wire_sent - before.reduce_wire_sent;
          report->wire_bytes_received =
              after.reduce_wire_received - before.reduce_wire_received;
          report->wall_ms = std::chrono::duration<double, std::milli>(
                                SteadyClock::now() - wall_start)
                                .count();
        }
        PseudoGradient reduced;
        reduced.delta = ParamVector(local.delta.layout(), std::move(result));
        reduced.precision = precision;
        reduced.outer_epoch = epoch;
        return reduced;
      } catch (const CollectiveError&) {
        // Data-phase failure: restart with the survivors.
        gc_inbox(epoch, attempt);
        attempt += 1;
        continue;
      }
    }
    throw CollectiveError("all-reduce failed after " +
                          std::to_string(options.max_restarts + 1) +
                          " attempts at epoch " + std::to_string(epoch));
  }

  TrafficSnapshot snapshot() const {
    TrafficSnapshot s;
    s.reduce_data_sent = reduce_data_sent.load();
    s.reduce_data_received = reduce_data_recv.load();
    s.reduce_wire_sent = reduce_wire_sent.load();
    s.reduce_wire_received = reduce_wire_recv.load();
    s.control_sent = control_sent.load();
    s.control_received = control_recv.load();
    s.heartbeat_sent = heartbeat_sent.load();
    s.heartbeat_received = heartbeat_recv.load();
    return s;
  }

  void stop_threads() {
    stop_flag.store(true);
    inbox_cv.notify_all();
    if (server_thread.joinable()) {
      server_thread.join();
    }
    if (heartbeat_thread.joinable()) {
      heartbeat_thread.join();
    }
    engine_pool.close_all();
    background_pool.close_all();
    if (listener) {
      listener->close();
    }
  }
};

// ---------------------------------------------------------------------------
// Node public surface
// ---------------------------------------------------------------------------

Node::Node(const NodeOptions& options)
    : options_(options), self_id_(PeerId::random()) {
  impl_ = std::make_unique<Impl>(options_, self_id_);
  impl_->listener = std::make_unique<Listener>(options_.listen);
  impl_->self_address =
      Address{options_.listen.host.empty() ? "127.0.0.1" : options_.listen.host,
              impl_->listener->port()};
  impl_->membership.quorum_min = options_.quorum_min;
}

Node::~Node() {
  impl_->stop_threads();
}

Address Node::address() const {
  return impl_->self_address;
}

Membership Node::membership() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->membership;
}

TrafficSnapshot Node::traffic() const {
  return impl_->snapshot();
}

Membership Node::join(const std::optional<Address>& rendezvous) {
  const int64_t now = steady_ms();
  PeerInfo self;
  self.id = self_id_;
  self.address = impl_->self_address;
  self.status = PeerStatus::live;
  self.last_heartbeat_ms = now;

  if (!rendezvous) {
    std::lock_guard lock(impl_->mutex);
    impl_->membership.epoch = 1;
    impl_->membership.upsert(self);
    impl_->refresh_peers_key_locked();
    impl_->joined = true;
  } else {
    const json hello{{"run", options_.run_id},
                     {"id", self_id_.hex()},
                     {"host", impl_->self_address.host},
                     {"port", impl_->self_address.port}};
    auto conn = dial(*rendezvous, options_.dial_timeout_ms);
    const WireMessage message = json_message(MsgType::hello, hello);
    conn->send(message);
    impl_->count_sent(message);
    const auto reply =
        conn->recv(options_.dial_timeout_ms + options_.barrier_timeout_ms);
    if (!reply) {
      throw CollectiveError("join timed out; rendezvous peer unreachable");
    }
    impl_->count_received(*reply);
    const json welcome = parse_json_payload(*reply);
    if (!welcome.value("ok", false)) {
      throw ConfigError("join rejected: " +
                        welcome.value("reason", std::string("unknown")));
    }
    {
      std::lock_guard lock(impl_->mutex);
      impl_->joined = true;
    }
    impl_->adopt_membership(welcome.at("membership"));
    for (const auto& [key, entry] : welcome.at("store").items()) {
      impl_->apply_store_put(key, entry.at("version").get<uint64_t>(),
                             from_hex(entry.at("value").get<std::string>()));
    }
  }

  impl_->server_thread = std::thread([this] { impl_->server_loop(); });
  impl_->heartbeat_thread = std::thread([this] { impl_->heartbeat_loop(); });
  return membership();
}

void Node::leave() {
  {
    std::lock_guard lock(impl_->mutex);
    if (!impl_->joined || impl_->stopping) {
      impl_->stopping = true;
      impl_->stop_threads();
      return;
    }
    impl_->stopping = true;
  }
  const json j{{"run", options_.run_id}, {"from", self_id_.hex()}};
  const WireMessage message = json_message(MsgType::leave, j);
  for (const PeerInfo& peer : impl_->known_peers_snapshot()) {
    impl_->send_to(impl_->background_pool, peer.address, message);
  }
  impl_->stop_threads();
}

void Node::shutdown_abrupt() {
  impl_->stop_threads();
}

void Node::store_put(const std::string& key, std::vector<uint8_t> value) {
  uint64_t version = 0;
  {
    std::lock_guard lock(impl_->mutex);
    version = ++impl_->store_version;
    impl_->store[key] = {version, value};
  }
  const json j{{"run", options_.run_id},
               {"key", key},
               {"version", version},
               {"value", to_hex(value)}};
  const WireMessage message = json_message(MsgType::store_put, j);
  for (const PeerInfo& peer : impl_->known_peers_snapshot()) {
    impl_->send_to(impl_->engine_pool, peer.address, message);
  }
}

std::optional<std::vector<uint8_t>> Node::store_get_local(
    const std::string& key) const {
  std::lock_guard lock(impl_->mutex);
  const auto it = impl_->store.find(key);
  if (it == impl_->store.end()) {
    return std::nullopt;
  }
  return it->second.second;
}

std::optional<std::vector<uint8_t>> Node::store_get_remote(
    const Address& peer, const std::string& key) {
  auto conn = dial(peer, options_.dial_timeout_ms);
  const json j{{"run", options_.run_id}, {"key", key}};
  const WireMessage message = json_message(MsgType::store_get, j);
  conn->send(message);
  impl_->count_sent(message);
  const auto reply = conn->recv(options_.dial_timeout_ms * 2);
  if (!reply) {
    throw CollectiveError("store_get timed out");
  }
  impl_->count_received(*reply);
  const json value = parse_json_payload(*reply);
  if (!value.value("found", false)) {
    return std::nullopt;
  }
  return from_hex(value.at("value").get<std::string>());
}

void Node::set_dynamic_provider(
    std::function<std::optional<std::vector<uint8_t>>(const std::string&)>
        provider) {
  std::lock_guard lock(impl_->mutex);
  impl_->dynamic_provider = std::move(provider);
}

std::vector<PeerId> Node::barrier(uint64_t outer_epoch) {
  std::set<PeerId> suspects;
  return impl_->run_barrier(outer_epoch, 0, suspects).contributors;
}

PseudoGradient Node::all_reduce_avg(
    const PseudoGradient& local, ReduceReport* report,
    const std::function<void(const char*)>& hook) {
  static const std::function<void(const char*)> noop = [](const char*) {};
  return impl_->all_reduce(local, report, hook ? hook : noop);
}

// ---------------------------------------------------------------------------
// SocketCollective
// ---------------------------------------------------------------------------

size_t SocketCollective::world_size() const {
  return node_.membership().live_count();
}

PseudoGradient SocketCollective::all_reduce_avg(const PseudoGradient& local,
                                                ReduceReport* report) {
  return node_.all_reduce_avg(local, report, hook_);
}

}  // namespace diloco
