#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace crowdkit {

// Tensor shapes or operation parameters are inconsistent.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A file does not conform to one of the on-disk formats. `offset` is the
// byte position of the first offending byte.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, std::uint64_t byte_offset)
        : std::runtime_error(msg), offset(byte_offset) {}
    std::uint64_t offset;
};

// A computation produced or encountered non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace crowdkit
