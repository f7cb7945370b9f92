#pragma once

#include <stdexcept>
#include <string>

namespace tapo {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument value (task parameters, probabilities, search knobs).
class ParameterError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

/// NaN or infinite values where finite numbers are required.
class NumericError : public Error {
public:
    using Error::Error;
};

class GroupSizeError : public Error {
public:
    using Error::Error;
};

/// Inconsistent run or trainer configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. The message names the line and field when known.
class ParseError : public Error {
public:
    using Error::Error;
};

class RetrievalError : public Error {
public:
    using Error::Error;
};

class ExpansionError : public Error {
public:
    using Error::Error;
};

} // namespace tapo
