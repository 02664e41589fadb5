#pragma once

#include <stdexcept>
#include <string>

namespace kblam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value; the message names the offending key.
class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents. `line` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

/// A persisted token store no longer matches the KB or adapters it was built from.
class StaleStoreError : public Error {
public:
    using Error::Error;
};

/// Transient failure (network, remote service); the caller may retry.
class RetryableError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace kblam
