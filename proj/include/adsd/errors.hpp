#pragma once

#include <stdexcept>
#include <string>

namespace adsd {

// Base class for all engine errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or axis disagreement between tensors.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what) {}
};

// Invalid model/run configuration (bad rates, non-positive extents, unknown keys, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Bad input data: out-of-range labels, empty masks, corrupt files.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what) {}
};

// API misuse, e.g. backward on a non-scalar.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

}  // namespace adsd
