#pragma once

#include <stdexcept>
#include <string>

namespace memseg {

// Base class for everything this library throws.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Input bytes do not form the expected container (bad magic, malformed header).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(what) {}
};

// Container header was fine but the payload ends early.
class TruncationError : public FormatError {
public:
    explicit TruncationError(const std::string& what) : FormatError(what) {}
};

// A value is out of its documented range (class index overflow, bad config, ...).
class ValueError : public Error {
public:
    explicit ValueError(const std::string& what) : Error(what) {}
};

// Shapes that must agree do not (raster dims, patch grids, tensor dims).
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error(what) {}
};

}  // namespace memseg
