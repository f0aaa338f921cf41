#pragma once

#include <stdexcept>
#include <string>

namespace dctext {

// Base class for all library errors. Subclasses carry the failure identity;
// the message carries the particulars.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Configuration / input validation (CLI maps these to exit code 2).
struct DegenerateBox : Error {
    explicit DegenerateBox(const std::string& msg) : Error(msg) {}
};
struct OverlappingRegions : Error {
    explicit OverlappingRegions(const std::string& msg) : Error(msg) {}
};
struct InvalidArity : Error {
    explicit InvalidArity(const std::string& msg) : Error(msg) {}
};
struct ScheduleOverflow : Error {
    explicit ScheduleOverflow(const std::string& msg) : Error(msg) {}
};
struct InfeasiblePacking : Error {
    explicit InfeasiblePacking(const std::string& msg) : Error(msg) {}
};
struct UnknownPartialMask : Error {
    explicit UnknownPartialMask(const std::string& msg) : Error(msg) {}
};
// Out-of-contract argument not covered by a more specific class above.
struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& msg) : Error(msg) {}
};

// Runtime failures (CLI maps these to exit code 3).
struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};
struct EmptyRow : Error {
    explicit EmptyRow(const std::string& msg) : Error(msg) {}
};
struct OutOfBounds : Error {
    explicit OutOfBounds(const std::string& msg) : Error(msg) {}
};
struct NonMonotoneTime : Error {
    explicit NonMonotoneTime(const std::string& msg) : Error(msg) {}
};
struct EmptyList : Error {
    explicit EmptyList(const std::string& msg) : Error(msg) {}
};
struct DivergenceDetected : Error {
    explicit DivergenceDetected(const std::string& msg) : Error(msg) {}
};

// Config file problems (CLI maps these to exit code 1).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace dctext
