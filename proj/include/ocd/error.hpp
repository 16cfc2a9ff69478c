#pragma once

#include <stdexcept>
#include <string>

namespace ocd {

/// Shape or length mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed file content (CSV, IDX, checkpoint manifests).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A sample with zero spread, for which no density estimate exists.
class DegenerateDistribution : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// NaN or infinity showed up where a finite value is required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ocd
