#pragma once

#include <stdexcept>
#include <string>

namespace pdfd {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: config/data/format/usage/shape/domain -> 2, numeric aborts -> 3.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an operation's contract.
struct ShapeError : Error {
  using Error::Error;
};

// Math domain violation (log/sqrt of a non-positive operand).
struct DomainError : Error {
  using Error::Error;
};

// API misuse: backward on a non-scalar, tensor not on the tape, t out of
// range, malformed one-hot, empty batch where one is required.
struct UsageError : Error {
  using Error::Error;
};

// Invalid configuration value or unknown config key.
struct ConfigError : Error {
  using Error::Error;
};

// Dataset construction violates a split invariant.
struct DataError : Error {
  using Error::Error;
};

// Malformed file on disk; message carries a byte offset where known.
struct FormatError : Error {
  using Error::Error;
};

// NaN/Inf detected in a computed value.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace pdfd
