#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace loraxs {

// Root of every error the library raises. Subclasses name the failure
// category; the CLI maps them onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

// Raised when training produces a non-finite loss. Carries the optimizer
// step (0-based) at which it was observed.
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& what, std::size_t step)
        : NumericError(what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

class StateError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class SerializationError : public Error {
public:
    using Error::Error;
};

class IntegrityError : public Error {
public:
    IntegrityError(const std::string& what, std::size_t offset)
        : Error(what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class BaseMismatchError : public Error {
public:
    using Error::Error;
};

class MissingModuleError : public Error {
public:
    using Error::Error;
};

class RankMismatchError : public Error {
public:
    using Error::Error;
};

}  // namespace loraxs
