#pragma once

#include <stdexcept>
#include <string>

namespace lst {

// Base class for all library errors. Modules throw the concrete subclass
// named in their contract; tests match on the type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes disagree (matmul inner dims, elementwise mismatch, ...).
class DimensionError : public Error {
public:
    using Error::Error;
};

// An id fell outside a vocabulary or embedding table.
class IndexError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value. Carries the dotted field path when known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg, std::string field_path = "")
        : Error(field_path.empty() ? msg : field_path + ": " + msg),
          field_path_(std::move(field_path)) {}
    const std::string& field_path() const { return field_path_; }

private:
    std::string field_path_;
};

// API misuse: non-scalar loss, plan/sequence length mismatch, cross-tape vars.
class ContractError : public Error {
public:
    using Error::Error;
};

// Alignment span list inconsistent with the speech run it describes.
class AlignmentError : public Error {
public:
    using Error::Error;
};

// Unknown word id handed to the text tokenizer.
class VocabError : public Error {
public:
    using Error::Error;
};

// A word span cannot be divided into the requested number of subword pieces.
class SplitError : public Error {
public:
    using Error::Error;
};

// Cross-entropy was asked to average over zero positions.
class EmptyLossError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during optimization.
class DivergenceError : public Error {
public:
    using Error::Error;
};

// File could not be read, written, or parsed.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace lst
