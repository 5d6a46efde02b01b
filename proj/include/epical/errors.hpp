#ifndef EPICAL_ERRORS_HPP
#define EPICAL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace epical {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input data or configuration (bad spec, bad dimensions, bad file).
struct ValidationError : Error {
    using Error::Error;
};

/// State/derivative vector shape does not match the model layout.
struct DimensionError : ValidationError {
    using ValidationError::ValidationError;
};

/// Input values outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

/// The integrator produced a non-finite state.
struct IntegrationError : Error {
    IntegrationError(const std::string& what, int day) : Error(what), day(day) {}
    int day;
};

/// A series without usable structure (e.g. all-zero when a peak is required).
struct DegenerateSeriesError : Error {
    using Error::Error;
};

/// Method is listed in the registry but intentionally not implemented.
struct UnimplementedByDesign : Error {
    using Error::Error;
};

/// I/O failure (unreadable or unwritable path).
struct IoError : Error {
    using Error::Error;
};

} // namespace epical

#endif
