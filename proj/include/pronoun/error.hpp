#pragma once

#include <stdexcept>
#include <string>

namespace pronoun {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input records.
class DataQualityError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

// Calling an operation out of order, e.g. backward before forward.
class UsageError : public Error {
  public:
    using Error::Error;
};

// An upstream guarantee was broken.
class InvariantError : public Error {
  public:
    using Error::Error;
};

// Statistic is undefined for the given input (zero variance, single class, ...).
class UndefinedStatisticError : public Error {
  public:
    using Error::Error;
};

class NumericalError : public Error {
  public:
    NumericalError(const std::string& what, int layer)
        : Error(what + " (layer " + std::to_string(layer) + ")"), layer_(layer) {}
    int layer() const noexcept { return layer_; }

  private:
    int layer_;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

} // namespace pronoun
