#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mobileone {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A tensor or parameter has the wrong extent along a named dimension.
class ShapeError : public Error {
 public:
  ShapeError(std::string where, std::string dimension, std::size_t expected, std::size_t actual)
      : Error(where + ": " + dimension + " mismatch (expected " + std::to_string(expected) +
              ", got " + std::to_string(actual) + ")"),
        dimension_(std::move(dimension)),
        expected_(expected),
        actual_(actual) {}

  const std::string& dimension() const noexcept { return dimension_; }
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::string dimension_;
  std::size_t expected_;
  std::size_t actual_;
};

/// Invalid construction parameters (bad groups, illegal skip branch, unknown variant...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated weight container.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during training (non-finite loss etc.).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mobileone
