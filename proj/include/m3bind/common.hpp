#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace m3bind {

// Error taxonomy. The CLI maps these onto process exit codes:
//   ConfigError -> 2, DataFormatError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched dimensions, bad ranks, incompatible operands.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument values (negative rank, empty sequence, out-of-vocab id).
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf poisoning, degenerate embeddings, training divergence.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Corrupt or mistyped files: wrong magic, truncation, bad varints.
class DataFormatError : public Error {
 public:
  explicit DataFormatError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent run configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace m3bind
