#pragma once

#include <stdexcept>
#include <string>

namespace amimv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input data or configuration that violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// API misuse: wrong tensor kind passed, calls made out of order, etc.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace amimv
