#pragma once

#include <stdexcept>
#include <string>

namespace dadm {

/// Operand shapes are incompatible with the requested operation.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A value left the finite range, or an operation hit a numeric singularity.
struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Misuse of the differentiation tape (consumed tape, non-scalar loss, ...).
struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Malformed on-disk dataset or checkpoint.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Inconsistent configuration or contract violation by a caller.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace dadm
