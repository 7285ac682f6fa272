#pragma once

#include <stdexcept>
#include <string>

namespace flowsr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not line up (or an image has an unusable size).
struct ShapeError : Error {
    using Error::Error;
};

// A value lies outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

// The API was called out of contract (e.g. backward twice on one tape).
struct UsageError : Error {
    using Error::Error;
};

// An architecture or run configuration is inconsistent.
struct ConfigError : Error {
    using Error::Error;
};

// A matrix required to be invertible is (numerically) singular.
struct SingularError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace flowsr
