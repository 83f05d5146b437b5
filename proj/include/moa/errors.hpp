#pragma once

#include <stdexcept>
#include <string>

namespace moa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// The requested operation is not defined for this object.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated, or incompatible checkpoint.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration. `key()` names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace moa
