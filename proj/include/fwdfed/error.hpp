#pragma once

#include <stdexcept>
#include <string>

namespace fwdfed {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Vector or matrix dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared in parameters, losses or derivatives.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}

  // Error whose message already carries its location and field name.
  static ConfigError located(std::string field, const std::string& message) {
    return ConfigError(std::move(field), message, 0);
  }

  const std::string& field() const noexcept { return field_; }

 private:
  ConfigError(std::string field, const std::string& message, int)
      : Error(message), field_(std::move(field)) {}

  std::string field_;
};

// Metric requested for a model whose loss does not support it.
class UnsupportedMetricError : public Error {
 public:
  using Error::Error;
};

// Cosine similarity against a zero vector.
class UndefinedSimilarityError : public Error {
 public:
  using Error::Error;
};

// Training loss or parameters became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace fwdfed
