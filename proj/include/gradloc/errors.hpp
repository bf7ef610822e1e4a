#pragma once

#include <stdexcept>
#include <string>

namespace gradloc {

// Error taxonomy used across the library. Every failure mode maps onto one of
// these so callers (and the CLI) can report a single meaningful line.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes for an operation.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid user-supplied value (k out of range, tau <= 0, ...).
struct ParameterError : Error {
    using Error::Error;
};

// Inconsistent model/run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed payload inside an otherwise well-formed container.
struct DataError : Error {
    using Error::Error;
};

// Structurally broken file (wrong size, bad manifest, truncated blob).
struct FormatError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar, typed access with wrong dtype, ...).
struct ContractError : Error {
    using Error::Error;
};

}  // namespace gradloc
