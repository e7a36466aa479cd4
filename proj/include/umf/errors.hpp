#pragma once

#include <stdexcept>
#include <string>

namespace umf {

// Precondition or configuration violation. Maps to CLI exit code 1.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced NaN/Inf. Maps to CLI exit code 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorKind { BadMagic, VersionMismatch, Truncated, Malformed };

// Binary file could not be decoded.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

// A required artifact (checkpoint, dataset) is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define UMF_REQUIRE(cond, msg)                      \
  do {                                              \
    if (!(cond)) throw ::umf::InvalidArgument(msg); \
  } while (0)

}  // namespace umf
