#pragma once

#include <functional>
#include <vector>

#include "cgan/record.hpp"

namespace cgan {

struct ElementCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool finite = true;
};

struct CheckReport {
  std::vector<ElementCheck> elements;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Builds a scalar function of one input inside a record and returns the
/// scalar's handle.
using ScalarBuilder = std::function<ValueId(Record&, ValueId)>;

/// Compares reverse-mode gradients against central differences.
///
/// Relative error per element is |a - n| / max(|a|, |n|, floor); the floor keeps
/// near-zero gradients from turning round-off into huge ratios. Non-finite
/// function values are reported per element and count as failures.
CheckReport finite_diff_check(const ScalarBuilder& fn, const Tensor& x, double epsilon,
                              double tolerance, double floor = 1e-4);

}  // namespace cgan
