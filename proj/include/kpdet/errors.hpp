#pragma once

#include <stdexcept>
#include <string>

namespace kpdet {

// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Argument outside its documented range (non-positive delta, k too large, ...).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Acupoint rule references a landmark the skeleton does not have.
struct RuleError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Operation requires state that has not been established (e.g. weights not loaded).
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A computation produced NaN or Inf.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File read/write failure, reported with path context.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace kpdet
