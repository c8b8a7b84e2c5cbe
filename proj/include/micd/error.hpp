#pragma once

#include <stdexcept>
#include <string>

namespace micd {

// Raised for any violated precondition on shapes, ranges or configuration.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values in logits, losses or gradients.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed on-disk data (volume files, manifests, configs).
class FormatError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

} // namespace micd
