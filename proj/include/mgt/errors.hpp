#pragma once

#include <stdexcept>
#include <string>

namespace mgt {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Caller violated an operation contract (e.g. backward on a non-scalar).
struct ContractError : Error {
    using Error::Error;
};

// A config or argument combination that can never run.
struct InvalidConfigError : Error {
    using Error::Error;
};

// Degenerate numeric input (zero vector, all-zero matrix, ...).
struct DegenerateInputError : Error {
    using Error::Error;
};

// Numerical failure: non-finite values, eigensolver non-convergence.
struct NumericalError : Error {
    using Error::Error;
};

// Two algebraically equivalent code paths disagreed beyond tolerance.
struct InternalConsistencyError : Error {
    using Error::Error;
};

// A training run produced NaN/Inf; carries the offending layer when known.
struct InstabilityError : Error {
    int layer_index;
    explicit InstabilityError(const std::string& what, int layer = -1)
        : Error(what), layer_index(layer) {}
};

// Corpus/file ingestion failure.
struct IngestionError : Error {
    using Error::Error;
};

// Config file / override parsing failure.
struct ParseError : Error {
    using Error::Error;
};

// Output directory or file I/O failure.
struct IoError : Error {
    using Error::Error;
};

}  // namespace mgt
