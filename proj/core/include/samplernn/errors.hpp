#pragma once

#include <stdexcept>
#include <string>

namespace samplernn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An integer index (bin, target, row) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A computation produced or received NaN/Inf, or hit a degenerate norm.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; `field()` names the offending key when known.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}
  explicit ConfigError(const std::string& message) : ConfigError("", message) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Input data is unusable (empty split, zero variance, unreadable corpus).
class DataError : public Error {
 public:
  using Error::Error;
};

enum class WavErrorKind { kMalformedHeader, kUnsupportedCodec, kUnsupportedBitDepth, kUnsupportedRate, kUnsupportedChannels, kIo };

class WavError : public DataError {
 public:
  WavError(WavErrorKind kind, const std::string& message) : DataError(message), kind_(kind) {}
  WavErrorKind kind() const { return kind_; }

 private:
  WavErrorKind kind_;
};

enum class CheckpointErrorKind { kIo, kBadMagic, kVersionMismatch, kTruncated, kShapeMismatch, kMissingTensor, kMetadata };

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& message) : Error(message), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

}  // namespace samplernn
