#pragma once

#include <stdexcept>
#include <string>

namespace m2m {

// Invalid arguments, malformed configs, contract violations. CLI exit code 1.
struct validation_error : std::runtime_error {
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf escaping a computation, diverging solvers. CLI exit code 2.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable/corrupt files, bad magic numbers, checksum mismatches.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace m2m
