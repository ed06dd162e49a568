#pragma once

#include <stdexcept>

namespace amb {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape disagreement; the message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// API contract violation (non-scalar loss, reused tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration or option value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed corpus, spec, or checkpoint input.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite math is required; names the offender.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace amb
