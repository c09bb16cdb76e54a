#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sadnet {

// Base for every error raised by the library. The CLI maps the concrete
// subclass onto its exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent shapes, channel counts or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The caller asked for something the contract does not allow.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable files, malformed manifests.
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed binary or text payload; carries the byte offset of the problem.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte " + std::to_string(offset) + ")"), detail_(what), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  // Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::size_t offset_;
};

// Non-finite values during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sadnet
