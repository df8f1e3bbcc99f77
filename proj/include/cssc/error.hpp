#pragma once

#include <stdexcept>
#include <string>

namespace cssc {

// Runtime failure inside a module (I/O, numerics, shape contract violations).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed config, manifest, or option combination.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace cssc
