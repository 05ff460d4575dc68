#pragma once

#include <stdexcept>
#include <string>

namespace istd {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes or channel counts do not fit together.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An argument is outside its valid domain (eps <= 0, lambda <= 0, ...).
class ValueError : public Error {
public:
    using Error::Error;
};

/// A non-finite value appeared where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// File or format problem while reading or writing artifacts.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace istd
