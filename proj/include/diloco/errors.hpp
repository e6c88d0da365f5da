// Copyright (c) 2026 diloco-cpp authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace diloco {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Mismatched vector layouts or buffer lengths.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration (bad field value, unknown key, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values on a path that requires finite math.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Collective communication failure (timeouts, protocol violations).
class CollectiveError : public Error {
 public:
  using Error::Error;
};

/// Collective dropped below quorum; the run cannot continue.
class QuorumError : public CollectiveError {
 public:
  using CollectiveError::CollectiveError;
};

/// Corrupt or incompatible serialized data.
class SerializationError : public Error {
 public:
  using Error::Error;
};

}  // namespace diloco
