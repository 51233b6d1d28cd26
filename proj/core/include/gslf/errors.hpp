#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gslf {

/// Caller mistakes: bad shapes, labels out of range, malformed files or configs.
/// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// A run went numerically wrong (divergence, non-finite loss).
/// The CLI maps this to exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed checkpoint file; carries the byte offset where parsing failed.
class CheckpointError : public ValidationError {
 public:
  CheckpointError(const std::string& what, std::size_t byte_offset)
      : ValidationError(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

}  // namespace gslf
