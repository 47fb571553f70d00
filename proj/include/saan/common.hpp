#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace saan {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline constexpr const char* kVersion = "0.3.0";

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or sizes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Out-of-domain argument values (labels outside {0,1}, bad configs).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Malformed files, I/O failures, checkpoint mismatches.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line usage.
class UsageError : public Error {
 public:
  using Error::Error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

}  // namespace saan
