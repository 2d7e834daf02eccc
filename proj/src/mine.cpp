#include "mmx/mine.hpp"

#include <algorithm>
#include <cmath>

namespace mmx {

ProjectionBank make_projection_bank(uint64_t seed, int d, int dprime, int K) {
  if (d <= 0 || dprime <= 0 || K <= 0)
    throw Error("projection bank: d, dprime and K must be positive");
  ProjectionBank b;
  b.seed = seed;
  b.K = K;
  b.d = d;
  b.dprime = dprime;
  b.stacked = Tensor(std::vector<int>{d, K * dprime});
  Rng rng(seed);
  double sd = 1.0 / dprime;
  // draw order is (k, r, c) so each matrix is a contiguous block of draws
  for (int k = 0; k < K; ++k)
    for (int r = 0; r < dprime; ++r)
      for (int c = 0; c < d; ++c)
        b.stacked[c * (K * dprime) + k * dprime + r] = rng.normal(0, sd);
  return b;
}

Tensor bank_matrix(const ProjectionBank& bank, int k) {
  if (k < 0 || k >= bank.K) throw Error("projection bank: matrix index out of range");
  Tensor m(std::vector<int>{bank.dprime, bank.d});
  for (int r = 0; r < bank.dprime; ++r)
    for (int c = 0; c < bank.d; ++c) m[r * bank.d + c] = bank.entry(k, r, c);
  return m;
}

Tensor compress(const ProjectionBank& bank, const Tensor& x) {
  if (x.numel() != bank.d)
    throw Error("compress: input length " + std::to_string(x.numel()) +
                " does not match bank d=" + std::to_string(bank.d));
  int cols = bank.K * bank.dprime;
  Tensor out = Tensor::zeros({bank.K, bank.dprime});
  for (int c = 0; c < bank.d; ++c) {
    double xv = x[c];
    if (xv == 0.0) continue;
    const double* row = &bank.stacked.data[static_cast<size_t>(c) * cols];
    for (int j = 0; j < cols; ++j) out[j] += xv * row[j];
  }
  return out;
}

Tensor conv_features(const ModelState& m, const Tensor& x) {
  if (m.spec.layers.empty() || m.spec.layers[0].kind != LayerKind::conv2d)
    throw Error("conv_features: model's first layer is not a convolution");
  Tensor xb = as_batch(m.spec, x);
  Tape t;
  std::vector<Tape::Var> params = borrow_params_const(t, m);
  Tape::Var maps = forward_layers(t, m.spec, params, t.constant(xb), 0, 1);
  Tensor v = t.val(maps);  // [1, F, H, W]
  int f = v.dim(1), hw = v.dim(2) * v.dim(3);
  v.shape = {f, hw};
  return v;
}

PairBatch make_pair_batch(const Tensor& u, const Tensor& v,
                          const std::vector<int>& perm) {
  if (u.ndim() != 2 || !u.same_shape(v))
    throw Error("pair batch: u and v must be equal [K, fdim] tensors");
  int K = u.dim(0);
  if (static_cast<int>(perm.size()) != K)
    throw Error("pair batch: permutation length mismatch");
  std::vector<char> seen(static_cast<size_t>(K), 0);
  for (int p : perm) {
    if (p < 0 || p >= K || seen[static_cast<size_t>(p)])
      throw Error("pair batch: not a permutation");
    seen[static_cast<size_t>(p)] = 1;
  }
  PairBatch b;
  b.joint_u = u;
  b.joint_v = v;
  b.perm = perm;
  int fdim = u.dim(1);
  b.marg_v = Tensor(std::vector<int>{K, fdim});
  for (int k = 0; k < K; ++k)
    std::copy_n(v.data.begin() + static_cast<long>(perm[static_cast<size_t>(k)]) * fdim,
                fdim, b.marg_v.data.begin() + static_cast<long>(k) * fdim);
  return b;
}

Tape::Var statnet_rows(Tape& t, const ModelSpec& spec,
                       const std::vector<Tape::Var>& theta, Tape::Var u,
                       Tape::Var v) {
  Tape::Var pairs = t.concat_cols(u, v);
  return forward_layers(t, spec, theta, pairs,
                        0, static_cast<int>(spec.layers.size()));
}

Tape::Var dv_from_T(Tape& t, Tape::Var t_joint, Tape::Var t_marg) {
  Tape::Var term1 = t.mean(t_joint);
  const Tensor& marg = t.val(t_marg);
  double shift = *std::max_element(marg.data.begin(), marg.data.end());
  // detached shift keeps exp in range; the bound value is shift-exact
  Tape::Var lme =
      t.affine(t.log(t.mean(t.exp(t.affine(t_marg, 1.0, -shift)))), 1.0, shift);
  return t.sub(term1, lme);
}

double dv_objective(const ModelState& statnet, const PairBatch& batch) {
  Tape t;
  std::vector<Tape::Var> theta = borrow_params_const(t, statnet);
  Tape::Var tj = statnet_rows(t, statnet.spec, theta, t.constant(batch.joint_u),
                              t.constant(batch.joint_v));
  Tape::Var tm = statnet_rows(t, statnet.spec, theta, t.constant(batch.joint_u),
                              t.constant(batch.marg_v));
  return t.val(dv_from_T(t, tj, tm))[0];
}

MiEstimator::MiEstimator(const MiConfig& cfg, int input_dim)
    : cfg_(cfg),
      K_(cfg.K),
      fdim_(cfg.dprime),
      input_dim_(input_dim),
      shuffle_rng_(sub_seed(cfg.seed, "mine-shuffle")) {
  if (cfg.scheme != MiScheme::bank)
    throw Error("estimator: conv scheme needs a model");
  bank_ = make_projection_bank(sub_seed(cfg.seed, "bank"), input_dim,
                               cfg.dprime, cfg.K);
  init_net();
}

MiEstimator::MiEstimator(const MiConfig& cfg, const ModelState* conv)
    : cfg_(cfg), conv_model_(conv),
      shuffle_rng_(sub_seed(cfg.seed, "mine-shuffle")) {
  if (cfg.scheme != MiScheme::conv)
    throw Error("estimator: bank scheme takes an input dimension");
  if (conv == nullptr || conv->spec.layers.empty() ||
      conv->spec.layers[0].kind != LayerKind::conv2d)
    throw Error("estimator: conv scheme needs a first-conv-layer model");
  const LayerSpec& l = conv->spec.layers[0];
  K_ = l.out;
  fdim_ = conv->spec.input_shape[1] * conv->spec.input_shape[2];
  input_dim_ = conv->spec.input_numel();
  init_net();
}

void MiEstimator::init_net() {
  statnet_ = make_model(statistics_net_spec(fdim_, cfg_.hidden),
                        sub_seed(cfg_.seed, "statnet-init"));
  opt_ = make_optimizer(OptKind::adam, cfg_.lr);
}

Tensor MiEstimator::features(const Tensor& x) const {
  if (x.numel() != input_dim_)
    throw Error("estimator: sample length mismatch");
  if (cfg_.scheme == MiScheme::bank) {
    Tensor flat = x;
    flat.shape = {input_dim_};
    return compress(bank_, flat);
  }
  return conv_features(*conv_model_, x);
}

Tape::Var MiEstimator::features_on_tape(Tape& t, Tape::Var x_row) const {
  if (cfg_.scheme == MiScheme::bank) {
    Tape::Var s = t.borrow_const(&bank_.stacked);
    return t.reshape(t.matmul(x_row, s), {K_, fdim_});
  }
  const ModelSpec& spec = conv_model_->spec;
  std::vector<int> img = {1, spec.input_shape[0], spec.input_shape[1],
                          spec.input_shape[2]};
  Tape::Var x4 = t.reshape(x_row, img);
  std::vector<Tape::Var> params;
  params.reserve(conv_model_->params.size());
  for (const Tensor& p : conv_model_->params) params.push_back(t.borrow_const(&p));
  Tape::Var maps = forward_layers(t, spec, params, x4, 0, 1);
  return t.reshape(maps, {K_, fdim_});
}

std::vector<int> MiEstimator::draw_perm() { return shuffle_rng_.permutation(K_); }

Tape::Var MiEstimator::dv_on_tape(Tape& t, const Tensor& u, Tape::Var v,
                                  const std::vector<int>& perm) const {
  std::vector<Tape::Var> theta;
  theta.reserve(statnet_.params.size());
  for (const Tensor& p : statnet_.params) theta.push_back(t.borrow_const(&p));
  Tape::Var uc = t.borrow_const(&u);
  Tape::Var tj = statnet_rows(t, statnet_.spec, theta, uc, v);
  Tape::Var tm = statnet_rows(t, statnet_.spec, theta, uc, t.gather_rows(v, perm));
  return dv_from_T(t, tj, tm);
}

const Tensor& MiEstimator::ref_features(const Tensor& x) {
  if (ref_u_.numel() == 0 || ref_x_.data != x.data) {
    ref_x_ = x;
    ref_u_ = features(x);
  }
  return ref_u_;
}

const ProjectionBank& MiEstimator::bank() const {
  if (cfg_.scheme != MiScheme::bank)
    throw Error("estimator: no bank under the conv scheme");
  return bank_;
}

double MiEstimator::update(const Tensor& x, const Tensor& xpd, int steps) {
  if (steps < 0) throw Error("estimator: negative step count");
  if (!x.same_shape(xpd)) throw Error("estimator: x and x+delta shapes differ");
  const Tensor& u = ref_features(x);
  Tensor v = features(xpd);
  std::vector<Tensor*> params;
  for (Tensor& p : statnet_.params) params.push_back(&p);
  for (int s = 0; s < steps; ++s) {
    std::vector<int> perm = draw_perm();
    Tape t;
    std::vector<Tape::Var> theta = borrow_params(t, statnet_);
    Tape::Var tj = statnet_rows(t, statnet_.spec, theta, t.borrow_const(&u),
                                t.borrow_const(&v));
    PairBatch b = make_pair_batch(u, v, perm);
    Tape::Var tm = statnet_rows(t, statnet_.spec, theta, t.borrow_const(&u),
                                t.constant(b.marg_v));
    Tape::Var bound = dv_from_T(t, tj, tm);
    t.backward(t.affine(bound, -1.0, 0.0));  // ascend
    std::vector<const Tensor*> grads;
    grads.reserve(theta.size());
    for (Tape::Var tv : theta) grads.push_back(&t.grad(tv));
    optimizer_step(opt_, params, grads);
  }
  PairBatch eval = make_pair_batch(u, v, draw_perm());
  last_estimate_ = dv_objective(statnet_, eval);
  return last_estimate_;
}

Tensor MiEstimator::gradient_wrt_delta(const Tensor& x, const Tensor& delta) {
  if (!x.same_shape(delta))
    throw Error("estimator: delta shape does not match x");
  const Tensor& u = ref_features(x);
  Tensor x_flat = x;
  x_flat.shape = {1, input_dim_};
  Tensor d_flat = delta;
  d_flat.shape = {1, input_dim_};
  Tape t;
  Tape::Var dvar = t.input(d_flat);
  Tape::Var xpd = t.add(t.constant(x_flat), dvar);
  Tape::Var v = features_on_tape(t, xpd);
  Tape::Var bound = dv_on_tape(t, u, v, draw_perm());
  t.backward(bound);
  Tensor g = t.grad(dvar);
  g.shape = delta.shape;
  return g;
}

double mine_update(MiEstimator& est, const Tensor& x, const Tensor& xpd,
                   int steps) {
  return est.update(x, xpd, steps);
}

Tensor mi_gradient_wrt_delta(MiEstimator& est, const Tensor& x,
                             const Tensor& delta) {
  return est.gradient_wrt_delta(x, delta);
}

double dv_train_step(ModelState& statnet, OptimizerState& opt,
                     const Tensor& u, const Tensor& v,
                     const std::vector<int>& perm) {
  PairBatch b = make_pair_batch(u, v, perm);
  Tape t;
  std::vector<Tape::Var> theta = borrow_params(t, statnet);
  Tape::Var tj = statnet_rows(t, statnet.spec, theta, t.constant(b.joint_u),
                              t.constant(b.joint_v));
  Tape::Var tm = statnet_rows(t, statnet.spec, theta, t.constant(b.joint_u),
                              t.constant(b.marg_v));
  Tape::Var bound = dv_from_T(t, tj, tm);
  double value = t.val(bound)[0];
  t.backward(t.affine(bound, -1.0, 0.0));
  std::vector<Tensor*> params;
  for (Tensor& p : statnet.params) params.push_back(&p);
  std::vector<const Tensor*> grads;
  for (Tape::Var tv : theta) grads.push_back(&t.grad(tv));
  optimizer_step(opt, params, grads);
  return value;
}

}  // namespace mmx
