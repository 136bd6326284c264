#pragma once

#include <stdexcept>
#include <string>

namespace callosum {

// Bad or missing input data: unreadable files, malformed manifests,
// out-of-range values, infeasible generator specs. CLI maps this to exit 2.
class DataError : public std::runtime_error {
  public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid arguments to an operation (caller bug or bad flag value).
// CLI maps this to exit 1.
class UsageError : public std::invalid_argument {
  public:
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Failures at run time that are neither usage nor input data problems
// (non-finite loss, IO failures mid-write). CLI maps this to exit 3.
class RuntimeFailure : public std::runtime_error {
  public:
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace callosum
