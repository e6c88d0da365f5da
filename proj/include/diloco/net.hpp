// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal blocking TCP plumbing used by the peer-to-peer collective:
// framed connections, a listener, and a small per-target connection pool.

#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include "diloco/wire.hpp"

namespace diloco {

struct Address {
  std::string host;
  uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  bool operator==(const Address&) const = default;
};

Address parse_address(const std::string& text);

/// One framed TCP connection. send() is atomic under an internal mutex so
/// multiple threads may share a connection for one-way messages;
/// request/response users must hold their own discipline.
class Connection {
 public:
  explicit Connection(int fd);
  ~Connection();

  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  void send(const WireMessage& message);

  /// Blocking receive with deadline; nullopt on timeout, throws
  /// CollectiveError on closed/broken connections.
  std::optional<WireMessage> recv(int timeout_ms);

  /// Non-blocking drain of everything the OS has buffered. Returns false
  /// when the peer closed the connection.
  bool read_available(std::vector<WireMessage>& out);

  void close();
  bool closed() const { return fd_ < 0; }
  int fd() const { return fd_; }

 private:
  int fd_ = -1;
  std::mutex send_mutex_;
  FrameParser parser_;
};

std::unique_ptr<Connection> dial(const Address& address, int timeout_ms);

class Listener {
 public:
  explicit Listener(const Address& bind_address);
  ~Listener();

  /// Accept with timeout; nullopt when none arrived.
  std::unique_ptr<Connection> accept(int timeout_ms);

  uint16_t port() const { return port_; }
  int fd() const { return fd_; }
  void close();

 private:
  int fd_ = -1;
  uint16_t port_ = 0;
};

/// Lazily dialed, cached connections keyed by address. Thread-safe.
class ConnPool {
 public:
  explicit ConnPool(int dial_timeout_ms = 2000) : dial_timeout_(dial_timeout_ms) {}

  /// Shared connection for the address; dials when missing or broken.
  std::shared_ptr<Connection> get(const Address& address);

  /// Drop a broken connection so the next get() redials.
  void invalidate(const Address& address);
  void close_all();

 private:
  int dial_timeout_;
  std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<Connection>> conns_;
};

}  // namespace diloco
