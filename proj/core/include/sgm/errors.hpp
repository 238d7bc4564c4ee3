#pragma once

#include <stdexcept>
#include <string>

namespace sgm {

// Malformed or unreadable input artifacts (datasets, checkpoints, models).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted because the loss blew up.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// An exactness check that must hold by construction failed.
class VerificationError : public std::runtime_error {
 public:
  explicit VerificationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sgm
