#pragma once

#include <stdexcept>
#include <string>

namespace changeseg {

// Base class for every error raised by the toolkit. Subclasses let callers
// (CLI, HTTP service) map failures onto exit codes and status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or missing input files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Dimension, band-count or length mismatches between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (alpha, k, patch size, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Numerical failure: singular covariance, non-finite loss, ...
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Error annotated with the pipeline stage that raised it. what() renders as
// "[stage] message".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("[" + stage + "] " + message), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace changeseg
