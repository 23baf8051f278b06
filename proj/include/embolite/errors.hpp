#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace embolite {

// Base of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or indivisible spatial dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or model specification (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing, malformed or inconsistent data on disk (CLI exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// Binary file parse failure; `offset` is the byte position of the problem.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// NaN/Inf encountered in values or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace embolite
