#pragma once

#include <stdexcept>
#include <string>

namespace poisonbench {

/// Invalid configuration value (bad dimension, degenerate spec, unknown enum).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Mismatched tensor/embedding geometry between caller and callee.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Input that is empty after preprocessing (e.g. a document with no tokens).
struct EmptyInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A vector with zero norm reached a normalization step.
struct SingularityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed textual input file (manifest, config, lexicon).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated binary file.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Corpus split that violates the stratification contract.
struct SplitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A pipeline stage invoked before its upstream artifacts exist.
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace poisonbench
