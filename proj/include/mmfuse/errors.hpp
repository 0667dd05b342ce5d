#pragma once

#include <stdexcept>
#include <string>

namespace mmfuse {

// Base for everything thrown by the library. The CLI maps subclasses to
// stable process exit codes: ConfigError -> 2, IoError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes incompatible with the requested operation.
struct DimensionError : Error {
    using Error::Error;
};

// Index or slice range outside a tensor extent.
struct BoundsError : Error {
    using Error::Error;
};

// Invalid configuration: bad hyperparameters, malformed config files,
// protocol parameters that do not fit the dataset.
struct ConfigError : Error {
    using Error::Error;
};

// API misuse: backward on a non-scalar, replaying a consumed record,
// reading a gradient that was never produced.
struct ContractError : Error {
    using Error::Error;
};

// Non-finite values or a diverged computation.
struct NumericError : Error {
    using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Dataset ingestion failures; message names the offending sample.
struct IngestionError : IoError {
    using IoError::IoError;
};

}  // namespace mmfuse
