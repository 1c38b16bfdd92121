#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bseg {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input. `line()` is 1-based, 0 when not tied to a line.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A caller broke an operation's precondition (bad argument, bad config).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class SpecError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class TooFewPoints : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class KTooLarge : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class KTooSmall : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class BadIndex : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class LengthMismatch : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class BadLabel : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};
class EmptyMatrix : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

/// NaN or infinity produced by a forward or backward computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

}  // namespace bseg
