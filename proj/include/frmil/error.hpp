#pragma once

#include <stdexcept>
#include <string>

namespace frmil {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A mask leaves nothing to normalise or reduce over.
class InvalidMaskError : public Error {
 public:
  using Error::Error;
};

/// Input data breaks a precondition: empty bag, single-class set, bad range.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure unrelated to content validity.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss, gradient or parameter.
class NumericError : public Error {
 public:
  using Error::Error;
};

class StoreError : public Error {
 public:
  enum class Kind { MissingFile, SizeMismatch, NonFinite, BadManifest };

  StoreError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class CheckpointError : public Error {
 public:
  enum class Kind { Missing, BadMagic, VersionMismatch, BadHeader, ShapeMismatch, Truncated, NonFinite };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace frmil
