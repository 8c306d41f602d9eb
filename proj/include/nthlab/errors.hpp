#pragma once

#include <stdexcept>
#include <string>

namespace nthlab {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatches and index-out-of-range. Messages carry both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Non-finite values, blown-up integrations, non-PSD inputs.
struct NumericError : Error {
    using Error::Error;
};

// Iterative method failed to reach tolerance; carries the last iterate.
struct ConvergenceError : Error {
    ConvergenceError(const std::string& msg, double last_estimate, double residual)
        : Error(msg), last_estimate(last_estimate), residual(residual) {}
    double last_estimate;
    double residual;
};

// Bad experiment specs, unknown config keys, malformed files.
struct ConfigError : Error {
    using Error::Error;
};

} // namespace nthlab
