#pragma once

#include <stdexcept>
#include <string>

namespace gwmoe {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN / Inf encountered where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// API called in the wrong state (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

// Corrupt or truncated file.
class FormatError : public Error {
public:
    using Error::Error;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

// Input data violates a documented invariant (e.g. score row not summing to 1).
class DataError : public Error {
public:
    using Error::Error;
};

}  // namespace gwmoe
