#pragma once

#include <stdexcept>
#include <string>

namespace arig {

// Base of every error the engine raises. `exit_code()` is what the CLI
// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 2; }
};

// Shapes, dimensions and configuration values that do not fit together.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Frames or cache entries delivered out of order.
class SequencingError : public Error {
 public:
  using Error::Error;
};

// Input data that is structurally well formed but violates a contract
// (negative energy, wrong feature length, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// File format problems. Subclasses let callers tell the failure modes apart.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class MissingTensorError : public FormatError {
 public:
  MissingTensorError(const std::string& name)
      : FormatError("missing tensor '" + name + "'"), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

// A non-finite value surfaced inside the network or the sampler.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

}  // namespace arig
