#pragma once

#include <stdexcept>
#include <string>

namespace demix {

/// Base of every error raised by the library. The message is prefixed with
/// the module that raised it, e.g. "audio-io: truncated payload in x.wav".
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Shape or configuration contract violated by a caller.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// A NaN or infinity appeared in a forward value or gradient.
class NumericError : public Error {
 public:
  NumericError(const std::string& op, const std::string& what)
      : Error("tensorops", what + " (produced by " + op + ")"), op_(op) {}

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

}  // namespace demix
