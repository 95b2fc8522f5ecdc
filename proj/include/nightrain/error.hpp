#pragma once

#include <stdexcept>
#include <string>

namespace nightrain {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// A pseudo pair whose region mask selects nothing. Callers skip the pair.
class DegeneratePairError : public Error {
 public:
  using Error::Error;
};

}  // namespace nightrain
