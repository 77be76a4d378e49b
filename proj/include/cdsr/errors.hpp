#pragma once

#include <stdexcept>
#include <string>

namespace cdsr {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor / image dimensions or parameter shapes do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or unsupported file contents (images, checkpoints, configs).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Filesystem failures: missing files, unwritable paths.
class IoError : public Error {
public:
    using Error::Error;
};

/// A value that must be finite (loss term, gradient) is NaN or Inf.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Arguments outside an operation's documented domain.
class ArgumentError : public Error {
public:
    using Error::Error;
};

} // namespace cdsr
