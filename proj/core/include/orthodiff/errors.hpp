#pragma once

#include <stdexcept>
#include <string>

namespace orthodiff {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can map it onto an exit code without string inspection.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input violates a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor or vector extents disagree with the contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in inputs or during optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration or a missing upstream artifact.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace orthodiff
