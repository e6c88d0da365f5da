// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "diloco/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace diloco {

namespace {

[[noreturn]] void throw_errno(const std::string& what) {
  throw CollectiveError(what + ": " + std::strerror(errno));
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

sockaddr_in to_sockaddr(const Address& address) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(address.port);
  const std::string host = address.host.empty() ? "127.0.0.1" : address.host;
  if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1) {
    throw ConfigError("bad IPv4 address '" + host + "'");
  }
  return sa;
}

}  // namespace

Address parse_address(const std::string& text) {
  const size_t colon = text.rfind(':');
  if (colon == std::string::npos) {
    throw ConfigError("address '" + text + "' must be host:port");
  }
  Address address;
  address.host = text.substr(0, colon);
  const int port = std::stoi(text.substr(colon + 1));
  if (port < 0 || port > 65535) {
    throw ConfigError("port out of range in '" + text + "'");
  }
  address.port = static_cast<uint16_t>(port);
  return address;
}

Connection::Connection(int fd) : fd_(fd) {
  set_nodelay(fd_);
#ifdef SO_NOSIGPIPE
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_NOSIGPIPE, &one, sizeof(one));
#endif
}

Connection::~Connection() {
  close();
}

void Connection::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

void Connection::send(const WireMessage& message) {
  const std::vector<uint8_t> frame = encode_frame(message);
  std::lock_guard lock(send_mutex_);
  if (fd_ < 0) {
    throw CollectiveError("send on closed connection");
  }
  size_t sent = 0;
  while (sent < frame.size()) {
    const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent,
                             MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      throw_errno("send");
    }
    sent += static_cast<size_t>(n);
  }
}

std::optional<WireMessage> Connection::recv(int timeout_ms) {
  if (auto message = parser_.next()) {
    return message;
  }
  uint8_t chunk[16384];
  while (true) {
    pollfd pfd{fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, timeout_ms);
    if (ready == 0) {
      return std::nullopt;
    }
    if (ready < 0) {
      if (errno == EINTR) {
        continue;
      }
      throw_errno("poll");
    }
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n == 0) {
      throw CollectiveError("connection closed by peer");
    }
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      throw_errno("recv");
    }
    parser_.feed(std::span(chunk, static_cast<size_t>(n)));
    if (auto message = parser_.next()) {
      return message;
    }
  }
}

bool Connection::read_available(std::vector<WireMessage>& out) {
  uint8_t chunk[16384];
  while (true) {
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), MSG_DONTWAIT);
    if (n == 0) {
      while (auto message = parser_.next()) {
        out.push_back(std::move(*message));
      }
      return false;
    }
    if (n < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        break;
      }
      if (errno == EINTR) {
        continue;
      }
      return false;
    }
    parser_.feed(std::span(chunk, static_cast<size_t>(n)));
  }
  while (auto message = parser_.next()) {
    out.push_back(std::move(*message));
  }
  return true;
}

std::unique_ptr<Connection> dial(const Address& address, int timeout_ms) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) {
    throw_errno("socket");
  }
  const sockaddr_in sa = to_sockaddr(address);
  // Connect with a deadline: nonblocking connect + poll.
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa));
  if (rc < 0 && errno != EINPROGRESS) {
    ::close(fd);
    throw_errno("connect to " + address.str());
  }
  if (rc < 0) {
    pollfd pfd{fd, POLLOUT, 0};
    const int ready = ::poll(&pfd, 1, timeout_ms);
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    if (ready <= 0 || err != 0) {
      ::close(fd);
      throw CollectiveError("connect to " + address.str() + " failed: " +
                            (ready <= 0 ? "timeout" : std::strerror(err)));
    }
  }
  ::fcntl(fd, F_SETFL, flags);
  return std::make_unique<Connection>(fd);
}

Listener::Listener(const Address& bind_address) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) {
    throw_errno("socket");
  }
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in sa = to_sockaddr(bind_address);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa)) < 0) {
    ::close(fd_);
    throw_errno("bind " + bind_address.str());
  }
  if (::listen(fd_, 64) < 0) {
    ::close(fd_);
    throw_errno("listen");
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

Listener::~Listener() {
  close();
}

void Listener::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

std::unique_ptr<Connection> Listener::accept(int timeout_ms) {
  pollfd pfd{fd_, POLLIN, 0};
  const int ready = ::poll(&pfd, 1, timeout_ms);
  if (ready <= 0) {
    return nullptr;
  }
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) {
    return nullptr;
  }
  return std::make_unique<Connection>(fd);
}

std::shared_ptr<Connection> ConnPool::get(const Address& address) {
  const std::string key = address.str();
  {
    std::lock_guard lock(mutex_);
    auto it = conns_.find(key);
    if (it != conns_.end() && !it->second->closed()) {
      return it->second;
    }
  }
  std::shared_ptr<Connection> conn = dial(address, dial_timeout_);
  std::lock_guard lock(mutex_);
  conns_[key] = conn;
  return conn;
}

void ConnPool::invalidate(const Address& address) {
  std::lock_guard lock(mutex_);
  conns_.erase(address.str());
}

void ConnPool::close_all() {
  std::lock_guard lock(mutex_);
  for (auto& [key, conn] : conns_) {
    conn->close();
  }
  conns_.clear();
}

}  // namespace diloco
