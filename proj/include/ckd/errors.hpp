#pragma once

#include <stdexcept>
#include <string>

namespace ckd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between tensors.
struct DimError : Error {
  using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or out-of-range input data (token ids, empty corpora, ...).
struct DataError : Error {
  using Error::Error;
};

// API precondition violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

// Optimization failure (divergence).
struct TrainError : Error {
  using Error::Error;
};

// Checkpoint deserialization failure.
struct LoadError : Error {
  using Error::Error;
};

}  // namespace ckd
