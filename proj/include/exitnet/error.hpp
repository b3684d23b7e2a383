#pragma once

#include <stdexcept>
#include <string>

namespace exitnet {

// Common base so callers can catch everything from this library at once.
// Every throw site names the offending shapes/fields/paths in the message.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer rank or dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

// A precondition of an operation was violated (bad argument, wrong call order).
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericalError : Error {
  using Error::Error;
};

// Invalid model or run configuration; message names the field.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed file content (checkpoints, IDX data, config files).
struct FormatError : Error {
  using Error::Error;
};

// Budget outside the feasible range of the cost model.
struct BudgetError : Error {
  using Error::Error;
};

}  // namespace exitnet
