#pragma once

#include <stdexcept>
#include <string>

namespace opgrpo {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor or latent dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of x <= 0, zero variance, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// A NaN or Inf surfaced in a forward or backward pass. The message names the originating op.
class NumericError : public Error {
public:
    using Error::Error;
};

// Misuse of an API contract: double backward, out-of-range step index, missing buffer entry.
class StateError : public Error {
public:
    using Error::Error;
};

// Invalid run configuration. `field` names the offending key.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& message)
        : Error(field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Corrupt, truncated or incompatible checkpoint / container file.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace opgrpo
