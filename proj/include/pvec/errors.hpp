#pragma once

#include <stdexcept>
#include <string>

namespace pvec {

/// Base of every error raised by the library. `exit_code()` is the process
/// status the command-line tool reports for it.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 3; }
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// API misuse (non-scalar loss, backward without a tape, ...).
class UsageError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

// Object is not in a state that allows the call (e.g. eval-mode BN without stats).
class StateError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class ConfigError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Malformed or truncated file contents.
class FormatError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// Invalid input data (too-short audio, zero-norm embedding, ...).
class InputError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// Stage-1 -> stage-2 weight transfer could not be completed.
class TransferError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

// NaN/Inf during training, failed gradient check.
class NumericError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

} // namespace pvec
