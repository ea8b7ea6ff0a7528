#pragma once

#include <stdexcept>
#include <string>

namespace ck {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid configuration, arguments or request (user-facing, exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Model file problems: version mismatch, checksum failure, truncated blob.
class FormatError : public Error {
public:
    using Error::Error;
};

// Graph structure errors: unknown node, duplicate hook, invalid hook point.
class GraphError : public Error {
public:
    using Error::Error;
};

// Non-finite values during training (exit code 3).
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace ck
