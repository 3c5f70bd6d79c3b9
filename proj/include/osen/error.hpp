#pragma once

#include <stdexcept>
#include <string>

namespace osen {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents or lengths of the operands do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value is outside the admissible domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared where finite values are required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Cholesky breakdown: the matrix handed to an SPD solver is not positive definite.
class NotSpdError : public Error {
 public:
  using Error::Error;
};

/// Serialized data (weight files, IDX files, masks) is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Experiment configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace osen
