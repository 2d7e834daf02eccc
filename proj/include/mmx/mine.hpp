#pragma once

#include <cstdint>
#include <vector>

#include "mmx/model.hpp"
#include "mmx/rng.hpp"
#include "mmx/tensor.hpp"

namespace mmx {

// K random compression matrices M_k of shape [dprime, d] with i.i.d.
// N(0, (1/dprime)^2) entries, stored stacked as one [d, K*dprime] tensor so
// that compressing is a single row-vector matmul. The same bank is applied
// to a sample and to its perturbation.
struct ProjectionBank {
  uint64_t seed = 0;
  int K = 0, d = 0, dprime = 0;
  Tensor stacked;  // [d, K*dprime]; entry(c, k*dprime+r) = M_k[r][c]

  double entry(int k, int r, int c) const {
    return stacked[c * (K * dprime) + k * dprime + r];
  }
};

ProjectionBank make_projection_bank(uint64_t seed, int d, int dprime, int K);
// M_k as a [dprime, d] tensor, for oracle comparisons
Tensor bank_matrix(const ProjectionBank& bank, int k);
// all K compressed views of x, as [K, dprime]
Tensor compress(const ProjectionBank& bank, const Tensor& x);

// output of the model's first convolution layer (with bias, before the
// activation), one flattened map per filter: [K = filters, h*w]
Tensor conv_features(const ModelState& m, const Tensor& x);

// K joint pairs (u_k, v_k) plus marginal partners v_(k) through a shuffle
struct PairBatch {
  Tensor joint_u, joint_v;  // [K, fdim]
  Tensor marg_v;            // joint_v rows permuted
  std::vector<int> perm;
};
PairBatch make_pair_batch(const Tensor& u, const Tensor& v,
                          const std::vector<int>& perm);

// Donsker-Varadhan bound of one batch under the statistics net:
// I = mean_k T(u_k,v_k) - log(mean_k exp T(u_k,v_(k))), with the
// log-mean-exp max-shifted by a detached constant (exact for any shift).
double dv_objective(const ModelState& statnet, const PairBatch& batch);

// tape-level pieces, shared by estimator training and the attack loop
Tape::Var statnet_rows(Tape& t, const ModelSpec& spec,
                       const std::vector<Tape::Var>& theta, Tape::Var u,
                       Tape::Var v);
Tape::Var dv_from_T(Tape& t, Tape::Var t_joint, Tape::Var t_marg);

enum class MiScheme { bank, conv };

struct MiConfig {
  MiScheme scheme = MiScheme::bank;
  int K = 500;
  int dprime = 128;
  std::vector<int> hidden = {100, 100};
  double lr = 1e-4;
  int t_inner = 10;  // ascent steps per attack iteration
  uint64_t seed = 0;
};

// Per-sample estimator of I(x; x+delta). Owns the statistics net, its
// optimizer, and the shuffle stream; warm-starts across updates. One
// estimator serves one attack instance; parallel attacks use independent
// seeds.
class MiEstimator {
 public:
  MiEstimator(const MiConfig& cfg, int input_dim);           // bank scheme
  MiEstimator(const MiConfig& cfg, const ModelState* conv);  // conv scheme

  const MiConfig& config() const { return cfg_; }
  int pair_count() const { return K_; }
  int feature_dim() const { return fdim_; }

  Tensor features(const Tensor& x) const;  // [K, fdim]
  // compressed views of a differentiable row [1, d] on an external tape
  Tape::Var features_on_tape(Tape& t, Tape::Var x_row) const;

  std::vector<int> draw_perm();
  // DV bound on an external tape: reference features u (constant), v
  // differentiable, theta borrowed constant
  Tape::Var dv_on_tape(Tape& t, const Tensor& u, Tape::Var v,
                       const std::vector<int>& perm) const;

  // caches the compressed reference so attack iterations skip recompression
  const Tensor& ref_features(const Tensor& x);

  // T_I ascent steps on theta, each with a fresh shuffle, then a fresh-shuffle
  // evaluation; returns the final bound value
  double update(const Tensor& x, const Tensor& xpd, int steps);
  // d(dv)/d(delta) at fixed theta and one fixed fresh shuffle
  Tensor gradient_wrt_delta(const Tensor& x, const Tensor& delta);

  double last_estimate() const { return last_estimate_; }
  ModelState& statnet() { return statnet_; }
  const ModelState& statnet() const { return statnet_; }
  OptimizerState& optimizer() { return opt_; }
  const ProjectionBank& bank() const;

 private:
  void init_net();

  MiConfig cfg_;
  int K_ = 0, fdim_ = 0, input_dim_ = 0;
  ProjectionBank bank_;
  const ModelState* conv_model_ = nullptr;
  ModelState statnet_;
  OptimizerState opt_;
  Rng shuffle_rng_;
  double last_estimate_ = 0;
  Tensor ref_x_, ref_u_;
};

// spec-level wrappers
double mine_update(MiEstimator& est, const Tensor& x, const Tensor& xpd,
                   int steps);
Tensor mi_gradient_wrt_delta(MiEstimator& est, const Tensor& x,
                             const Tensor& delta);

// one gradient-ascent step of theta on an explicit pair batch (vanilla MINE
// over a dataset of pairs; used by the Gaussian calibration path); returns
// the pre-step bound value
double dv_train_step(ModelState& statnet, OptimizerState& opt,
                     const Tensor& u, const Tensor& v,
                     const std::vector<int>& perm);

}  // namespace mmx
