#ifndef DEQFUSE_ERRORS_HPP
#define DEQFUSE_ERRORS_HPP

#include <stdexcept>
#include <string>
#include <vector>

namespace deqfuse {

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a fixed-point or adjoint iteration blows up. Carries the
// step metrics recorded up to the failure so callers can inspect them.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& msg, std::vector<double> partial_trace)
      : std::runtime_error(msg), trace_(std::move(partial_trace)) {}

  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

}  // namespace deqfuse

#endif  // DEQFUSE_ERRORS_HPP
