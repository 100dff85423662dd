#pragma once

// Shared aliases and error types used across the library.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rllr {

// Token ids are small non-negative integers indexing a Vocab.
using Token = int32_t;
using TokenSeq = std::vector<Token>;

// Thrown when a numeric computation produces a non-finite value that the
// caller is not prepared to continue from (loss blow-ups, bad checkpoints).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when an operation refuses to run because its on-disk or configured
// preconditions are not met (missing inputs, hash mismatch, existing outputs
// without --force). The CLI maps this to exit code 2.
class PreconditionError : public std::runtime_error {
 public:
  explicit PreconditionError(const std::string& what)
      : std::runtime_error(what) {}
};

// Configuration file / override problems: unknown keys, unparsable values.
class ConfigError : public PreconditionError {
 public:
  explicit ConfigError(const std::string& what) : PreconditionError(what) {}
};

}  // namespace rllr
