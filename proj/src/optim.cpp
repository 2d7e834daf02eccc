#include "mmx/optim.hpp"

#include <cmath>

namespace mmx {

OptimizerState make_optimizer(OptKind kind, double lr) {
  if (lr <= 0) throw Error("make_optimizer: learning rate must be positive");
  OptimizerState st;
  st.kind = kind;
  st.lr = lr;
  return st;
}

void optimizer_step(OptimizerState& st, const std::vector<Tensor*>& params,
                    const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size())
    throw Error("optimizer_step: params/grads count mismatch");
  if (st.lr <= 0) throw Error("optimizer_step: learning rate must be positive");
  for (size_t i = 0; i < params.size(); ++i)
    if (!params[i]->same_shape(*grads[i]))
      throw Error("optimizer_step: shape mismatch at slot " + std::to_string(i));

  if (st.kind == OptKind::sgd) {
    ++st.step_count;
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      for (int j = 0; j < p.numel(); ++j) p[j] -= st.lr * g[j];
    }
    return;
  }

  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.push_back(Tensor::zeros(p->shape));
      st.v.push_back(Tensor::zeros(p->shape));
    }
  }
  if (st.m.size() != params.size())
    throw Error("optimizer_step: parameter list changed size");

  ++st.step_count;
  double t = static_cast<double>(st.step_count);
  double bc1 = 1.0 - std::pow(st.beta1, t);
  double bc2 = 1.0 - std::pow(st.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    if (!m.same_shape(p))
      throw Error("optimizer_step: moment shape mismatch at slot " +
                  std::to_string(i));
    for (int j = 0; j < p.numel(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      p[j] -= st.lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

}  // namespace mmx
