#pragma once

#include <stdexcept>
#include <string>

namespace vndiff {

// Root of every error the library throws. Each subclass maps to one CLI exit
// code (see tools/commands.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument value (out-of-range schedule endpoint, bad config, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition that guards model integrity,
// e.g. fine-tuning against an unfrozen base or noise injected at t = 1.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Input data is malformed (negative activity, inconsistent dataset, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// File-format problems. Subclasses let callers tell the failure modes apart.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class PayloadLengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TensorNameMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DigestMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace vndiff
