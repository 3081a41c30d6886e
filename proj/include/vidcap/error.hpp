#pragma once

#include <stdexcept>
#include <string>

namespace vidcap {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by an op, a loss, or an optimizer input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Rejected input: bad config field, malformed manifest, label vector, etc.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace vidcap
