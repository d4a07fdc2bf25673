#ifndef SPINEAGE_ERRORS_HPP
#define SPINEAGE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace spineage {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A record or value violates a domain invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Two operands disagree on length or shape.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A configuration value is out of range or inconsistent with its inputs.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A design matrix lost rank; the message names the offending columns.
class RankDeficiencyError : public Error {
public:
    using Error::Error;
};

/// A persisted file is malformed, truncated or has the wrong version.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage was asked to run before its upstream artifacts exist.
class DependencyError : public Error {
public:
    using Error::Error;
};

} // namespace spineage

#endif
