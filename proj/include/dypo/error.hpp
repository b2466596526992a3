#pragma once

#include <stdexcept>
#include <string>

namespace dypo {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed a malformed argument (bad token, empty list, wrong pair order).
class InputError : public Error {
 public:
  using Error::Error;
};

// Hyperparameters or shapes outside their documented range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on an object in the wrong state (e.g. advantages not yet populated).
class StateError : public Error {
 public:
  using Error::Error;
};

// A numerical producer yielded non-finite values.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A bench could not gather enough qualifying samples within its budget.
class BenchError : public Error {
 public:
  using Error::Error;
};

}  // namespace dypo
