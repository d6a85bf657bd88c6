#pragma once

#include <stdexcept>
#include <string>

namespace tgps {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Undecodable or malformed input (images, JSON documents, checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A pose with no visible joint where one is required.
class DegeneratePoseError : public Error {
public:
    using Error::Error;
};

class ClusteringError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or flag values; the CLI maps this to exit code 1.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A record or argument that violates its schema. Carries the offending field name.
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& msg) : Error(msg), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// A caption with no in-vocabulary word.
class VocabularyError : public ValidationError {
public:
    explicit VocabularyError(const std::string& msg) : ValidationError("caption", msg) {}
};

/// Non-finite loss during training.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace tgps
