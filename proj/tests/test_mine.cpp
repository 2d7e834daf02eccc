#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mmx/data_io.hpp"
#include "mmx/mine.hpp"

using namespace mmx;

namespace {

Tensor random_vec(Rng& rng, int n) {
  Tensor t(std::vector<int>{n});
  for (int i = 0; i < n; ++i) t[i] = rng.uniform01();
  return t;
}

double median_abs_diff(const std::vector<double>& vals, int a, int b) {
  std::vector<double> diffs;
  for (int i = a; i < b; ++i)
    diffs.push_back(std::fabs(vals[static_cast<size_t>(i + 1)] -
                              vals[static_cast<size_t>(i)]));
  std::sort(diffs.begin(), diffs.end());
  return diffs[diffs.size() / 2];
}

// factorial-number-system rank of a permutation, for uniformity counting
int perm_rank(const std::vector<int>& p) {
  int n = static_cast<int>(p.size());
  int rank = 0;
  for (int i = 0; i < n; ++i) {
    int smaller = 0;
    for (int j = i + 1; j < n; ++j)
      if (p[static_cast<size_t>(j)] < p[static_cast<size_t>(i)]) ++smaller;
    int fact = 1;
    for (int m = 2; m <= n - 1 - i; ++m) fact *= m;
    rank += smaller * fact;
  }
  return rank;
}

}  // namespace

TEST_CASE("projection bank is deterministic in its seed") {
  ProjectionBank a = make_projection_bank(42, 6, 3, 4);
  ProjectionBank b = make_projection_bank(42, 6, 3, 4);
  CHECK(a.stacked.data == b.stacked.data);
  ProjectionBank c = make_projection_bank(43, 6, 3, 4);
  CHECK(a.stacked.data != c.stacked.data);
}

TEST_CASE("projection bank entry statistics") {
  // one million entries: d*dprime*K = 50*20*1000
  ProjectionBank b = make_projection_bank(7, 50, 20, 1000);
  double n = b.stacked.numel();
  double sum = 0, sq = 0;
  for (double v : b.stacked.data) {
    sum += v;
    sq += v * v;
  }
  double mean = sum / n;
  double sd = std::sqrt(sq / n - mean * mean);
  double target_sd = 1.0 / 20;
  CHECK(std::fabs(mean) < 4 * target_sd / std::sqrt(n));
  CHECK(std::fabs(sd - target_sd) / target_sd < 0.01);
}

TEST_CASE("bank construction rejects empty dimensions") {
  CHECK_THROWS_AS(static_cast<void>(make_projection_bank(1, 4, 0, 2)), Error);
  CHECK_THROWS_AS(static_cast<void>(make_projection_bank(1, 4, 2, 0)), Error);
  CHECK_THROWS_AS(static_cast<void>(make_projection_bank(1, 0, 2, 2)), Error);
}

TEST_CASE("compress is linear and matches a naive reimplementation") {
  ProjectionBank b = make_projection_bank(11, 3, 2, 1);
  Rng rng(5);
  Tensor x = random_vec(rng, 3);

  Tensor zero = compress(b, Tensor::zeros({3}));
  for (int i = 0; i < zero.numel(); ++i) CHECK(zero[i] == 0.0);

  Tensor cx = compress(b, x);
  Tensor x2 = x;
  for (int i = 0; i < 3; ++i) x2[i] *= 2.0;
  Tensor cx2 = compress(b, x2);
  for (int i = 0; i < cx.numel(); ++i)
    CHECK(cx2[i] == doctest::Approx(2.0 * cx[i]).epsilon(1e-12));

  // independent oracle: plain row-by-row dot products of M_0
  Tensor m0 = bank_matrix(b, 0);
  REQUIRE(cx.shape == std::vector<int>{1, 2});
  for (int r = 0; r < 2; ++r) {
    double dot = 0;
    for (int c = 0; c < 3; ++c) dot += m0[r * 3 + c] * x[c];
    CHECK(cx[r] == doctest::Approx(dot).epsilon(1e-12));
  }

  CHECK_THROWS_AS(static_cast<void>(compress(b, Tensor::zeros({4}))), Error);
}

TEST_CASE("conv features") {
  SUBCASE("zero input and zero bias give zero maps") {
    ModelState m = make_model(conv_ae_spec(1, 8, 8, 4), 3);
    for (int i = 0; i < m.params[1].numel(); ++i) m.params[1][i] = 0.0;
    Tensor f = conv_features(m, Tensor::zeros({1, 8, 8}));
    REQUIRE(f.shape == std::vector<int>{4, 64});
    for (int i = 0; i < f.numel(); ++i) CHECK(f[i] == 0.0);
  }
  SUBCASE("1x1 identity kernel reproduces the input channel") {
    ModelSpec s;
    s.kind = ModelKind::conv_ae;
    s.input_shape = {1, 4, 4};
    s.layers = {{LayerKind::conv2d, 1, 1, 1}, {LayerKind::sigmoid, 0, 0, 0}};
    s.latent_layer = 0;
    ModelState m = make_model(s, 1);
    m.params[0] = Tensor::from({1, 1, 1, 1}, {1.0});
    m.params[1] = Tensor::zeros({1});
    Rng rng(8);
    Tensor x(std::vector<int>{1, 4, 4});
    for (int i = 0; i < 16; ++i) x[i] = rng.uniform01();
    Tensor f = conv_features(m, x);
    REQUIRE(f.shape == std::vector<int>{1, 16});
    for (int i = 0; i < 16; ++i) CHECK(f[i] == doctest::Approx(x[i]));
  }
  SUBCASE("averaging kernel on a constant image is constant inside") {
    ModelSpec s;
    s.kind = ModelKind::conv_ae;
    s.input_shape = {1, 6, 6};
    s.layers = {{LayerKind::conv2d, 1, 1, 3}, {LayerKind::sigmoid, 0, 0, 0}};
    s.latent_layer = 0;
    ModelState m = make_model(s, 1);
    m.params[0] = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
    m.params[1] = Tensor::zeros({1});
    Tensor x = Tensor::full({1, 6, 6}, 0.7);
    Tensor f = conv_features(m, x);
    for (int y = 1; y < 5; ++y)
      for (int c = 1; c < 5; ++c)
        CHECK(f[y * 6 + c] == doctest::Approx(0.7));
  }
  SUBCASE("dense-first model is rejected") {
    ModelState m = make_model(dense_ae_spec(8, 4), 2);
    CHECK_THROWS_AS(static_cast<void>(conv_features(m, Tensor::zeros({8}))),
                    Error);
  }
}

TEST_CASE("pair batch validates its permutation") {
  Tensor u = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor v = Tensor::from({3, 2}, {9, 8, 7, 6, 5, 4});
  PairBatch b = make_pair_batch(u, v, {2, 0, 1});
  CHECK(b.marg_v.data == std::vector<double>{5, 4, 9, 8, 7, 6});
  CHECK_THROWS_AS(static_cast<void>(make_pair_batch(u, v, {0, 0, 1})), Error);
  CHECK_THROWS_AS(static_cast<void>(make_pair_batch(u, v, {0, 1, 3})), Error);
  CHECK_THROWS_AS(static_cast<void>(make_pair_batch(u, v, {0, 1})), Error);
}

TEST_CASE("constant statistics give a zero bound") {
  ModelState net = make_model(statistics_net_spec(2, {8}), 5);
  for (Tensor& p : net.params) std::fill(p.data.begin(), p.data.end(), 0.0);
  net.params.back()[0] = 0.7;  // output bias: T identically 0.7
  Rng rng(2);
  Tensor u(std::vector<int>{4, 2}), v(std::vector<int>{4, 2});
  for (int i = 0; i < 8; ++i) {
    u[i] = rng.uniform01();
    v[i] = rng.uniform01();
  }
  PairBatch b = make_pair_batch(u, v, {3, 1, 0, 2});
  CHECK(dv_objective(net, b) == 0.0);
}

TEST_CASE("single-pair batches always score zero") {
  // K=1: the only permutation is the identity, marginal equals joint
  ModelState net = make_model(statistics_net_spec(3, {16}), 9);
  Rng rng(4);
  Tensor u(std::vector<int>{1, 3}), v(std::vector<int>{1, 3});
  for (int i = 0; i < 3; ++i) {
    u[i] = rng.uniform01();
    v[i] = rng.uniform01();
  }
  PairBatch b = make_pair_batch(u, v, {0});
  CHECK(dv_objective(net, b) == doctest::Approx(0.0));
}

TEST_CASE("bound value from hand-picked statistics") {
  // joint T = [1,1], marginal T = [0, ln 3]:
  // 1 - log((exp 0 + exp ln3)/2) = 1 - ln 2
  Tape t;
  Tape::Var tj = t.input(Tensor::from({2, 1}, {1.0, 1.0}));
  Tape::Var tm = t.input(Tensor::from({2, 1}, {0.0, std::log(3.0)}));
  Tape::Var bound = dv_from_T(t, tj, tm);
  CHECK(t.val(bound)[0] == doctest::Approx(1.0 - std::log(2.0)).epsilon(1e-12));
  CHECK(t.val(bound)[0] == doctest::Approx(0.30685).epsilon(1e-4));
}

TEST_CASE("zero steps leave the estimator untouched") {
  MiConfig cfg;
  cfg.K = 8;
  cfg.dprime = 4;
  cfg.hidden = {16};
  cfg.seed = 3;
  MiEstimator est(cfg, 12);
  Rng rng(6);
  Tensor x = random_vec(rng, 12), xpd = random_vec(rng, 12);
  std::vector<Tensor> before = est.statnet().params;
  double value = est.update(x, xpd, 0);
  CHECK(std::isfinite(value));
  CHECK(value == est.last_estimate());
  REQUIRE(before.size() == est.statnet().params.size());
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(before[i].data == est.statnet().params[i].data);
}

TEST_CASE("identical pairs score at least as high as independent ones") {
  MiConfig cfg;
  cfg.K = 32;
  cfg.dprime = 8;
  cfg.hidden = {32};
  cfg.lr = 1e-3;
  cfg.seed = 5;
  Rng rng(9);
  Tensor x = random_vec(rng, 16), z = random_vec(rng, 16);
  MiEstimator ea(cfg, 16), eb(cfg, 16);
  double ixx = ea.update(x, x, 150);
  double ixz = eb.update(x, z, 150);
  CHECK(std::isfinite(ixx));
  CHECK(std::isfinite(ixz));
  CHECK(ixx > ixz);
}

TEST_CASE("estimator recovers the analytic MI of correlated gaussians") {
  const double rho = 0.9;
  const int dim = 2, n = 512, K = 128;
  PairedDataset pd = synth_gaussian_pairs(rho, dim, n, 41);
  double target = pd.analytic_mi;
  ModelState net =
      make_model(statistics_net_spec(dim, {64}), sub_seed(41, "statnet-init"));
  OptimizerState opt = make_optimizer(OptKind::adam, 2e-3);
  Rng rng(sub_seed(41, "mine-shuffle"));
  auto batch_of = [&](int count, bool sequential) {
    Tensor u(std::vector<int>{count, dim}), v(std::vector<int>{count, dim});
    for (int i = 0; i < count; ++i) {
      int idx = sequential ? i : static_cast<int>(rng.below(n));
      for (int j = 0; j < dim; ++j) {
        u[i * dim + j] = pd.first[static_cast<size_t>(idx)][j];
        v[i * dim + j] = pd.second[static_cast<size_t>(idx)][j];
      }
    }
    return std::make_pair(u, v);
  };
  for (int step = 0; step < 2500; ++step) {
    auto [u, v] = batch_of(K, false);
    dv_train_step(net, opt, u, v, rng.permutation(K));
  }
  auto [ue, ve] = batch_of(n, true);
  double acc = 0;
  const int reps = 8;
  for (int r = 0; r < reps; ++r)
    acc += dv_objective(net, make_pair_batch(ue, ve, rng.permutation(n)));
  double estimate = acc / reps;
  CHECK(std::fabs(estimate - target) / target < 0.2);
}

TEST_CASE("delta gradient of the bound") {
  MiConfig cfg;
  cfg.K = 8;
  cfg.dprime = 4;
  cfg.hidden = {16};
  cfg.seed = 17;
  Rng rng(23);
  Tensor x = random_vec(rng, 16);
  Tensor delta(std::vector<int>{16});
  for (int i = 0; i < 16; ++i) delta[i] = 0.1 * (rng.uniform01() - 0.5);

  SUBCASE("constant statistics give a zero gradient") {
    MiEstimator est(cfg, 16);
    for (Tensor& p : est.statnet().params)
      std::fill(p.data.begin(), p.data.end(), 0.0);
    est.statnet().params.back()[0] = 1.3;
    Tensor g = mi_gradient_wrt_delta(est, x, delta);
    REQUIRE(g.same_shape(delta));
    for (int i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
  }

  SUBCASE("matches central finite differences") {
    MiEstimator est(cfg, 16);
    // the estimator's first drawn shuffle, replayed for the value function
    std::vector<int> perm =
        Rng(sub_seed(cfg.seed, "mine-shuffle")).permutation(cfg.K);
    Tensor analytic = mi_gradient_wrt_delta(est, x, delta);
    const Tensor& u = est.ref_features(x);
    auto value_at = [&](const Tensor& d) {
      Tensor x_flat = x, d_flat = d;
      x_flat.shape = {1, 16};
      d_flat.shape = {1, 16};
      Tape t;
      Tape::Var v = est.features_on_tape(
          t, t.add(t.constant(x_flat), t.constant(d_flat)));
      return t.val(est.dv_on_tape(t, u, v, perm))[0];
    };
    double h = 1e-6, worst = 0;
    for (int i = 0; i < 16; ++i) {
      Tensor dp = delta, dm = delta;
      dp[i] += h;
      dm[i] -= h;
      double numeric = (value_at(dp) - value_at(dm)) / (2 * h);
      double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic[i])});
      worst = std::max(worst, std::fabs(numeric - analytic[i]) / denom);
    }
    CHECK_MESSAGE(worst <= 1e-4, "worst relative error ", worst);
  }

  SUBCASE("gradient is invariant to an output offset") {
    MiEstimator ea(cfg, 16), eb(cfg, 16);
    eb.statnet().params.back()[0] += 5.0;
    Tensor ga = mi_gradient_wrt_delta(ea, x, delta);
    Tensor gb = mi_gradient_wrt_delta(eb, x, delta);
    REQUIRE(ga.same_shape(gb));
    // mathematically identical; the shift perturbs rounding only
    for (int i = 0; i < ga.numel(); ++i)
      CHECK(ga[i] == doctest::Approx(gb[i]).epsilon(1e-9));
  }
}

TEST_CASE("shuffle permutations are uniform") {
  const int K = 5, draws = 10000, cells = 120;
  Rng rng(sub_seed(77, "mine-shuffle"));
  std::vector<int> count(cells, 0);
  for (int i = 0; i < draws; ++i)
    ++count[static_cast<size_t>(perm_rank(rng.permutation(K)))];
  double expect = static_cast<double>(draws) / cells;
  double chi2 = 0;
  for (int c : count) chi2 += (c - expect) * (c - expect) / expect;
  // chi-square critical value at df=119, significance 0.01
  CHECK(chi2 < 157.8);
}

TEST_CASE("warm-started estimates move in bounded steps") {
  // With theta warm-started and (x, delta) fixed, successive estimates never
  // jump: every per-iteration move stays under a small bound even while the
  // estimate itself drifts. Window medians are reported as a diagnostic; the
  // drift keeps them from decreasing monotonically, so they are not gated.
  const double eta = 0.1;  // observed max move 0.041 over 8 seeds
  for (uint64_t seed : {11ULL, 16ULL}) {
    MiConfig cfg;
    cfg.K = 128;
    cfg.dprime = 16;
    cfg.hidden = {64};
    cfg.lr = 1e-4;
    cfg.seed = seed;
    Rng rng(3 + seed);
    Tensor x = random_vec(rng, 64);
    Tensor xpd(std::vector<int>{64});
    for (int i = 0; i < 64; ++i) {
      double v = x[i] + 0.3 * (rng.uniform01() - 0.5);
      xpd[i] = std::min(1.0, std::max(0.0, v));
    }
    MiEstimator est(cfg, 64);
    std::vector<double> vals;
    for (int t = 0; t < 40; ++t) vals.push_back(est.update(x, xpd, 10));
    double max_move = 0;
    for (size_t i = 1; i < vals.size(); ++i) {
      CHECK(std::isfinite(vals[i]));
      max_move = std::max(max_move, std::fabs(vals[i] - vals[i - 1]));
    }
    CHECK_MESSAGE(max_move < eta, "seed ", seed, " max move ", max_move);
    MESSAGE("seed ", seed, ": median |dI| first half ",
            median_abs_diff(vals, 0, 19), ", second half ",
            median_abs_diff(vals, 20, 39), ", final ", vals.back());
  }
}
