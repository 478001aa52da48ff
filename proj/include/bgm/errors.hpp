#pragma once

#include <stdexcept>
#include <string>

namespace bgm {

/// Base of every library error. `exit_code()` is what the CLI returns.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 2; }
};

/// Dimension or parameter-length mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinite input to a numeric routine.
class NumericInputError : public Error {
 public:
  using Error::Error;
};

/// Dataset columns do not match what a structure or command expects.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration, argument, or file content.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Too few samples in a kernel window, bin, or neighbourhood.
class InsufficientSupport : public Error {
 public:
  using Error::Error;
};

/// An ETT query selected no evidence rows.
class EmptyEvidence : public Error {
 public:
  using Error::Error;
};

/// Evaluation needs hidden exogenous values that the dataset lacks.
class OracleUnavailable : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss. Carries the last finite checkpoint
/// (JSON text) so the caller can persist it.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::string checkpoint_json)
      : Error(what), checkpoint_(std::move(checkpoint_json)) {}
  int exit_code() const override { return 3; }
  const std::string& checkpoint() const { return checkpoint_; }

 private:
  std::string checkpoint_;
};

}  // namespace bgm
