#pragma once

#include <stdexcept>
#include <string>

namespace moiie {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / rank / index mismatch.
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf encountered, or a numeric precondition violated.
struct NumericError : Error {
    using Error::Error;
};

// Bad configuration value or unknown configuration key.
struct ConfigError : Error {
    using Error::Error;
};

// File or stream I/O failure, malformed file contents.
struct IoError : Error {
    using Error::Error;
};

}  // namespace moiie
