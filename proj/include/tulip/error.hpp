#pragma once

#include <stdexcept>
#include <string>

namespace tulip {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shapes that do not fit the operation.
struct DimensionError : Error {
    using Error::Error;
};

// A caller broke a documented precondition.
struct ContractError : Error {
    using Error::Error;
};

// Invalid model or run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// NaN or Inf produced by a forward op.
struct NumericError : Error {
    using Error::Error;
};

// Input that makes an operation undefined (zero-norm cosine, all-masked softmax row).
struct DegenerateInputError : Error {
    using Error::Error;
};

// A position or sequence that does not fit an absolute-position window.
struct OutOfWindowError : Error {
    OutOfWindowError(std::size_t length, std::size_t window)
        : Error("sequence of " + std::to_string(length) + " tokens does not fit the window of " +
                std::to_string(window)),
          length(length),
          window(window) {}
    std::size_t length;
    std::size_t window;
};

struct ParseError : Error {
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line(line) {}
    std::size_t line;
};

struct IoError : Error {
    using Error::Error;
};

// Checkpoint phase tag does not match the pipeline stage.
struct PhaseError : Error {
    using Error::Error;
};

}  // namespace tulip
