#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmx/tensor.hpp"

namespace mmx {

// Central-difference gradient check. The oracle side never touches the
// reverse pass: it re-runs the forward builder from scratch for every
// perturbed coordinate.
struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  int worst_input = -1; // which input tensor
  int worst_index = -1; // flat coordinate within it
};

// builder constructs a scalar output from the given differentiable leaves.
// Relative error uses max(1, |analytic|, |numeric|) as the denominator.
GradCheckReport finite_diff_check(
    const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& builder,
    const std::vector<Tensor>& points, double h, double tol);

}  // namespace mmx
