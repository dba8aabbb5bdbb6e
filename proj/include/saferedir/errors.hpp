#pragma once

#include <stdexcept>
#include <string>

namespace saferedir {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the domain of an operation (t > T, L == 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid or unknown configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced during training or a check.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Guidance session misuse (model/world dimension mismatch).
class SessionError : public Error {
 public:
  using Error::Error;
};

}  // namespace saferedir
