#pragma once

#include <stdexcept>
#include <string>

namespace xnet {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint contents do not fit the target (missing name, shape mismatch).
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint bytes do not follow the archive layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised when a training loss becomes NaN or infinite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace xnet
