// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moesplat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A scalar or structured argument is outside its documented domain.
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// Inputs are individually valid but inconsistent with each other
/// (shape mismatch, mixed channel counts, count mismatch).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// An operation was called without the cached state it depends on.
class StateError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf reached a place that requires finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace moesplat
