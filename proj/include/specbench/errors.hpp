#pragma once

#include <stdexcept>
#include <string>

namespace specbench {

// Input outside the admissible domain (crop/resample hull, shift bounds).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Malformed or inconsistent data: shape mismatch, bad labels, bad config.
class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Optimizer non-convergence, loss divergence, non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// predict() called on a model that has not been fitted.
class NotFittedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace specbench
