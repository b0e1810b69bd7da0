#pragma once

#include <stdexcept>
#include <string>

namespace nnlens {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatch; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Token id outside the vocabulary.
struct VocabError : Error {
    using Error::Error;
};

// Configuration file / override problems.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Activation key not advertised by the model.
struct KeyError : Error {
    using Error::Error;
};

// Requested (sentence, key) entry absent from a store.
struct LookupError : Error {
    using Error::Error;
};

// The attribution engine met an operation it has no rule for.
struct CapabilityError : Error {
    using Error::Error;
};

// Template corpus generation cannot satisfy the request.
struct GenerationError : Error {
    using Error::Error;
};

// Malformed input file; message carries the line number where known.
struct ParseError : Error {
    using Error::Error;
};

} // namespace nnlens
