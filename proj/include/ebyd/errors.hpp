#pragma once

#include <stdexcept>
#include <string>

namespace ebyd {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Array or architecture shapes do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value is outside the domain an operation accepts.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated binary file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during optimization or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ebyd
