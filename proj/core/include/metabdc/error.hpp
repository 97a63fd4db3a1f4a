#pragma once

#include <stdexcept>
#include <string>

namespace metabdc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when array shapes disagree with what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a computation produces or receives NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed files, manifests and configs.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace metabdc
