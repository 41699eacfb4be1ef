#pragma once

#include <stdexcept>
#include <string>

namespace opamp {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidDimension : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class InvalidParameter : public Error {
public:
  using Error::Error;
};

class InvalidPartition : public Error {
public:
  using Error::Error;
};

class IndexError : public Error {
public:
  using Error::Error;
};

class UnsupportedProtocol : public Error {
public:
  using Error::Error;
};

class DegenerateInput : public Error {
public:
  using Error::Error;
};

class InvalidVariance : public Error {
public:
  using Error::Error;
};

class InsufficientOrder : public Error {
public:
  using Error::Error;
};

class MissingState : public Error {
public:
  using Error::Error;
};

class InvalidMeasure : public Error {
public:
  using Error::Error;
};

class NumericalInstability : public Error {
public:
  using Error::Error;
};

/// Raised by fixed_point when the iteration budget runs out. Carries the
/// last iterate so callers can inspect how far it got.
class NonConvergence : public Error {
public:
  NonConvergence(const std::string &what, double last_iterate, int iterations)
      : Error(what), last_iterate_(last_iterate), iterations_(iterations) {}

  double last_iterate() const noexcept { return last_iterate_; }
  int iterations() const noexcept { return iterations_; }

private:
  double last_iterate_;
  int iterations_;
};

} // namespace opamp
