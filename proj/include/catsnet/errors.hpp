#pragma once

#include <stdexcept>
#include <string>

namespace catsnet {

// Common base so callers can catch everything raised by the library with
// one handler while still discriminating on the concrete type.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// tensor ops
struct ShapeMismatch : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct NotScalar : Error {
    using Error::Error;
};

// attention
struct AllMasked : Error {
    using Error::Error;
};
struct WiringInvalid : Error {
    using Error::Error;
};

// embedding
struct IdOutOfRange : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct EmptyFile : Error {
    using Error::Error;
};
struct DuplicateToken : Error {
    using Error::Error;
};

// blocks / model
struct EmptyStack : Error {
    using Error::Error;
};
struct EmptySentence : Error {
    using Error::Error;
};

// training
struct LabelOutOfRange : Error {
    using Error::Error;
};
struct EmptyDataset : Error {
    using Error::Error;
};

// data / checkpoint
struct MalformedLine : Error {
    using Error::Error;
};
struct BadLabel : Error {
    using Error::Error;
};
struct EmptyAfterTokenization : Error {
    using Error::Error;
};
struct VersionMismatch : Error {
    using Error::Error;
};
struct CorruptFile : Error {
    using Error::Error;
};

} // namespace catsnet
