#pragma once

#include <stdexcept>
#include <string>

namespace chprune {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated input files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration; maps to CLI exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pruning request the network structure cannot honour.
class PruneError : public Error {
 public:
  using Error::Error;
};

}  // namespace chprune
