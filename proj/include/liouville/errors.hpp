#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace liouville {

/// Invalid user-facing configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical breakdown (integration failure, non-convergence). Exit code 3.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File system or parse failure on persisted artifacts. Exit code 4.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when an ODE trajectory cannot be advanced. Carries the trajectory
/// index and the time that was reached so callers can drop and resample.
class IntegrationError : public NumericError {
public:
    IntegrationError(std::size_t trajectory, double time_reached, const std::string& what)
        : NumericError("trajectory " + std::to_string(trajectory) + " failed at t = " +
                       std::to_string(time_reached) + ": " + what),
          trajectory_(trajectory), time_reached_(time_reached) {}

    std::size_t trajectory() const noexcept { return trajectory_; }
    double time_reached() const noexcept { return time_reached_; }

private:
    std::size_t trajectory_;
    double time_reached_;
};

/// Training data that cannot be used as given (e.g. a nonpositive density
/// where the log is required).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace liouville
