#pragma once

#include <stdexcept>
#include <string>

namespace lumipower {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or model shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed, missing, or out-of-range input data (manifests, images, configs).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training or invalid numerical preconditions.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Checkpoint integrity failure.
class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace lumipower
