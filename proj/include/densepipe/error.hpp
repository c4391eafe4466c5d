#pragma once

#include <stdexcept>
#include <string>

namespace densepipe {

/// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation needs.
class ShapeError : public Error {
 public:
  ShapeError(std::string axis, const std::string& what)
      : Error("shape error on axis '" + axis + "': " + what), axis_(std::move(axis)) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a NaN or infinite loss.
class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Checkpoint tensors do not fit the model described by its config.
class CheckpointMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace densepipe
