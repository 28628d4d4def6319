#pragma once

#include <stdexcept>
#include <string>

namespace lmnet {

// Base for every error the library raises. The CLI maps IoError to exit
// code 3 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed or mismatching LMW container.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lmnet
