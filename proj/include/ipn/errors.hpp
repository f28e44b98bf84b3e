#pragma once

#include <stdexcept>
#include <string>

namespace ipn {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: ConfigError -> 2, DataError -> 3, everything else derived from
// Error -> 4.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-facing configuration: invalid hyperparameter, unknown variant,
// out-of-range threshold, malformed sweep spec.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Dataset or checkpoint content problems: missing files, payload size
// mismatches, label range violations, split overlaps.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Numeric failure during computation (non-finite loss, divergence).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Inputs that are numerically degenerate for the requested operation,
// e.g. a zero-norm vector fed to strict-mode cosine.
class DegenerateInputError : public NumericError {
public:
    explicit DegenerateInputError(const std::string& msg) : NumericError(msg) {}
};

// Shape disagreement between tensors.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Violated call contract (empty search space, non-scalar loss node, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

}  // namespace ipn
