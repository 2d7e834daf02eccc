#pragma once

#include <vector>

#include "mmx/tensor.hpp"

namespace mmx {

enum class OptKind { sgd, adam };

// One optimizer instance drives a fixed list of parameter tensors; moment
// arrays are allocated on the first step and keep the parameter shapes.
struct OptimizerState {
  OptKind kind = OptKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

OptimizerState make_optimizer(OptKind kind, double lr);

// p <- p - lr*g (sgd) or the bias-corrected adam update. Gradient ascent is
// done by passing negated gradients.
void optimizer_step(OptimizerState& st, const std::vector<Tensor*>& params,
                    const std::vector<const Tensor*>& grads);

}  // namespace mmx
