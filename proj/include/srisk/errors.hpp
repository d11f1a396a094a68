#pragma once

#include <stdexcept>
#include <string>

namespace srisk {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatch in a graph op.
struct ShapeError : Error {
  using Error::Error;
};

// Violated precondition of an operation.
struct ContractError : Error {
  using Error::Error;
};

// NaN or Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// Malformed file contents (bad magic, truncation, ...).
struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

// Metric has no defined value on the given data (e.g. no comparable pairs).
struct MetricUndefinedError : Error {
  using Error::Error;
};

}  // namespace srisk
