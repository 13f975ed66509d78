#ifndef CAST_ERROR_HPP
#define CAST_ERROR_HPP

#include <stdexcept>
#include <string>

namespace cast {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Dimension or index mismatch (empty input, bad shape, out-of-range key).
class ShapeError : public Error {
public:
    using Error::Error;
};

// A caller supplied an invalid argument or configuration value.
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Input data is insufficient or degenerate for the requested computation.
class DataError : public Error {
public:
    using Error::Error;
};

// A persisted artifact could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

// An artifact or plan failed a consistency check (format, version, digest,
// grid membership).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace cast

#endif
