#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lidia {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File and stream problems: missing files, short reads, write failures.
struct IoError : Error {
    using Error::Error;
};

// Malformed file contents. Carries the byte offset where parsing gave up.
struct ParseError : IoError {
    ParseError(const std::string& msg, std::size_t offset)
        : IoError(msg + " (at byte " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::size_t byte_offset;
};

// Dimension disagreements between values that must match.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration (window too small, bad sigma range, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (diverged training, bad gradients).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace lidia
