#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dic3d {

/// Coarse failure class. Each maps onto one CLI exit code.
enum class ErrorKind {
  config,     ///< invalid configuration or arguments (exit 2)
  numerical,  ///< divergence, degeneracy, rank deficiency (exit 3)
  io,         ///< unreadable/malformed files, write failures (exit 4)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}

  /// All violations found in one validation pass.
  explicit ConfigError(std::vector<std::string> issues)
      : Error(ErrorKind::config, join(issues)), issues_(std::move(issues)) {}

  const std::vector<std::string>& issues() const noexcept { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& issues) {
    std::string out = "configuration invalid (" + std::to_string(issues.size()) + " issue(s))";
    for (const auto& i : issues) out += "\n  - " + i;
    return out;
  }
  std::vector<std::string> issues_;
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::numerical: return 3;
    case ErrorKind::io: return 4;
  }
  return 1;
}

}  // namespace dic3d
