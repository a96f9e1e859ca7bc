#pragma once

#include <stdexcept>
#include <string>

namespace l2aed {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with what an operation requires.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A scalar argument is outside its admissible range.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// A request exceeds what a dataset or model was configured to hold.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// A caller broke an API contract (e.g. backward from a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Input data could not be read or is malformed.
class DataError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf or divergence during computation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Bad run configuration (unknown key, unparsable value).
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace l2aed
