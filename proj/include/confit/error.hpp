#pragma once

#include <stdexcept>
#include <string>

namespace confit {

// Base class for all errors thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Rank/shape/channel mismatches, non-integral strided output sizes.
struct ShapeError : Error {
  using Error::Error;
};

// Polyphase split on spatial dims not divisible by the stride.
struct DecompositionError : Error {
  using Error::Error;
};

// Misuse of a stateful object: degenerate batch, stale recovery cache,
// frozen bank mutation, duplicate/missing task, incomplete matrix.
struct StateError : Error {
  using Error::Error;
};

// Bad payloads: labels out of range, empty datasets, degenerate specs.
struct DataError : Error {
  using Error::Error;
};

// File-format problems: bad magic, version mismatch, truncation, checksum.
struct IoError : Error {
  using Error::Error;
};

// Invalid configuration: unknown keys, out-of-range values, bad flags.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace confit
