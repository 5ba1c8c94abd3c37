#pragma once

#include <stdexcept>
#include <string>

namespace sslab {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters or configuration fields.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Token index out of range, sequence too long, malformed dataset line.
class InputError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, repeated backward, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Loss or gradient became NaN/inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Corrupt or truncated checkpoint / metrics file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace sslab
