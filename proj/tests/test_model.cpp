#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "mmx/checkpoint.hpp"
#include "mmx/model.hpp"
#include "mmx/rng.hpp"

using namespace mmx;

namespace {

Dataset random_dataset(int n, int dim, uint64_t seed) {
  Dataset d;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Tensor t(std::vector<int>{dim});
    for (int j = 0; j < dim; ++j) t[j] = rng.uniform01();
    d.samples.push_back(std::move(t));
  }
  d.split = "train";
  return d;
}

void zero_params(ModelState& m) {
  for (Tensor& p : m.params) std::fill(p.data.begin(), p.data.end(), 0.0);
}

}  // namespace

TEST_CASE("zero-parameter dense AE outputs one half everywhere") {
  ModelState m = make_model(dense_ae_spec(4, 2), 1);
  zero_params(m);
  Tensor x = Tensor::row({0.1, 0.9, 0.4, 0.7});
  Tensor out = ae_forward(m, x);
  REQUIRE(out.same_shape(x));
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(0.5));
}

TEST_CASE("zero-parameter conv AE on a zero image outputs one half") {
  ModelState m = make_model(conv_ae_spec(1, 8, 8, 4), 1);
  zero_params(m);
  Tensor x = Tensor::zeros({1, 8, 8});
  Tensor out = ae_forward(m, x);
  REQUIRE(out.same_shape(x));
  for (int i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(0.5));
}

TEST_CASE("trained overcomplete AE reconstructs its training point") {
  Dataset d;
  d.samples.push_back(Tensor::row({0.3, 0.6, 0.4}));
  TrainConfig cfg;
  cfg.epochs = 1500;
  cfg.batch = 1;
  cfg.lr = 1e-2;
  cfg.seed = 7;
  ModelState init = make_model(dense_ae_spec(3, 8), sub_seed(7, "model-init"));
  double initial = model_objective(init, d);
  ModelState m = train_model(dense_ae_spec(3, 8), d, cfg);
  CHECK(m.final_loss < initial);
  Tensor rec = ae_forward(m, d.samples[0]);
  CHECK(recon_loss(d.samples[0], rec) < 0.05);
}

TEST_CASE("recon_loss values and properties") {
  CHECK(recon_loss(Tensor::row({0.2, 0.8}), Tensor::row({0.2, 0.8})) == 0.0);
  CHECK(recon_loss(Tensor::row({1, 0}), Tensor::row({0, 0})) ==
        doctest::Approx(1.0));
  CHECK(recon_loss(Tensor::row({1, 1}), Tensor::row({0, 0})) ==
        doctest::Approx(std::sqrt(2.0)));
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a(std::vector<int>{5}), b(std::vector<int>{5});
    for (int i = 0; i < 5; ++i) {
      a[i] = rng.uniform01();
      b[i] = rng.uniform01();
    }
    double ab = recon_loss(a, b);
    CHECK(ab == recon_loss(b, a));
    CHECK(ab >= 0.0);
    if (a.data != b.data) CHECK(ab > 0.0);
  }
  CHECK_THROWS_AS(recon_loss(Tensor::row({1}), Tensor::row({1, 2})), Error);
}

TEST_CASE("classifier logits") {
  ModelState zero = make_model(classifier_spec(3, 4, 2), 1);
  zero_params(zero);
  Tensor logits = classifier_logits(zero, Tensor::row({0.5, 0.5, 0.5}));
  REQUIRE(logits.numel() == 2);
  CHECK(logits[0] == 0.0);
  CHECK(logits[1] == 0.0);

  ModelState lin = make_model(classifier_spec(2, 0, 2), 1);
  lin.params[0] = Tensor::from({2, 2}, {1, 0, 0, 1});
  lin.params[1] = Tensor::zeros({2});
  Tensor out = classifier_logits(lin, Tensor::row({3, 1}));
  CHECK(out[0] == doctest::Approx(3.0));
  CHECK(out[1] == doctest::Approx(1.0));

  double e0 = std::exp(out[0]), e1 = std::exp(out[1]);
  CHECK(e0 / (e0 + e1) + e1 / (e0 + e1) == doctest::Approx(1.0));
}

TEST_CASE("one epoch of training lowers the objective") {
  Dataset d = random_dataset(1, 6, 11);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 1;
  cfg.lr = 1e-2;
  cfg.seed = 11;
  ModelState init = make_model(dense_ae_spec(6, 3), sub_seed(11, "model-init"));
  double initial = model_objective(init, d);
  ModelState m = train_model(dense_ae_spec(6, 3), d, cfg);
  CHECK(m.final_loss < initial);
}

TEST_CASE("zero epochs returns the initialization") {
  Dataset d = random_dataset(4, 6, 2);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 5;
  ModelState m = train_model(dense_ae_spec(6, 3), d, cfg);
  ModelState init = make_model(dense_ae_spec(6, 3), sub_seed(5, "model-init"));
  REQUIRE(m.params.size() == init.params.size());
  for (size_t i = 0; i < m.params.size(); ++i)
    CHECK(m.params[i].data == init.params[i].data);
}

TEST_CASE("same seed trains to bit-identical state") {
  Dataset d = random_dataset(12, 8, 9);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 4;
  cfg.seed = 21;
  ModelState a = train_model(dense_ae_spec(8, 4), d, cfg);
  ModelState b = train_model(dense_ae_spec(8, 4), d, cfg);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i)
    CHECK(a.params[i].data == b.params[i].data);
  CHECK(a.final_loss == b.final_loss);
  CHECK(a.epoch_loss == b.epoch_loss);
}

TEST_CASE("divergent training aborts with a diagnostic") {
  Dataset d = random_dataset(4, 6, 2);
  Rng rng(2);
  for (int i = 0; i < 4; ++i) d.labels.push_back(static_cast<int>(rng.below(3)));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 4;
  cfg.opt = OptKind::sgd;
  cfg.lr = 1e160;  // second-step logits overflow through the relu path
  cfg.seed = 2;
  CHECK_THROWS_WITH_AS(
      static_cast<void>(train_model(classifier_spec(6, 16, 3), d, cfg)),
      doctest::Contains("diverged"), Error);
}

TEST_CASE("training loss is non-increasing in at least 90% of seeded runs") {
  int monotone = 0;
  const int runs = 20;
  for (int s = 0; s < runs; ++s) {
    Dataset d = random_dataset(64, 24, 1000 + static_cast<uint64_t>(s));
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch = 16;
    cfg.lr = 1e-3;
    cfg.seed = 50 + static_cast<uint64_t>(s);
    ModelState m = train_model(dense_ae_spec(24, 12), d, cfg);
    bool ok = true;
    for (size_t e = 1; e < m.epoch_loss.size(); ++e)
      if (m.epoch_loss[e] > m.epoch_loss[e - 1]) ok = false;
    if (ok) ++monotone;
  }
  CHECK(monotone >= runs * 9 / 10);
}

TEST_CASE("sparse AE with zero penalty matches the dense trajectory") {
  Dataset d = random_dataset(16, 10, 77);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 8;
  cfg.seed = 13;
  ModelState dense = train_model(dense_ae_spec(10, 5), d, cfg);
  ModelState sparse = train_model(sparse_ae_spec(10, 5, 0.0), d, cfg);
  REQUIRE(dense.params.size() == sparse.params.size());
  for (size_t i = 0; i < dense.params.size(); ++i)
    CHECK(dense.params[i].data == sparse.params[i].data);
}

TEST_CASE("sparse objective adds the mean absolute latent activation") {
  ModelState m = make_model(sparse_ae_spec(4, 2, 1.0), 3);
  zero_params(m);
  Dataset d;
  d.samples.push_back(Tensor::row({0.2, 0.4, 0.6, 0.8}));
  // zero params: latent relu(0) = 0, so the penalty vanishes and the
  // objective is the plain squared error against 0.5
  double expect = 0;
  for (double v : {0.2, 0.4, 0.6, 0.8}) expect += (v - 0.5) * (v - 0.5);
  expect /= 4;
  CHECK(model_objective(m, d) == doctest::Approx(expect));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  ModelSpec spec = conv_ae_spec(1, 8, 8, 3);
  ModelState m = make_model(spec, 123);
  m.params[0][0] = 1.0 / 3.0;
  m.params[1][0] = -0.0;
  m.params[2][1] = 1e-308;
  std::string path = "ckpt_roundtrip.bin";
  save_checkpoint(path, m);
  ModelState back = load_checkpoint(path, spec);
  REQUIRE(back.params.size() == m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i) {
    REQUIRE(back.params[i].shape == m.params[i].shape);
    for (int j = 0; j < m.params[i].numel(); ++j) {
      // compare bit patterns so -0.0 and denormals must survive
      double a = m.params[i][j], b = back.params[i][j];
      CHECK(std::memcmp(&a, &b, 8) == 0);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corrupt files") {
  ModelSpec spec = dense_ae_spec(4, 2);
  ModelState m = make_model(spec, 9);
  std::string path = "ckpt_corrupt.bin";
  save_checkpoint(path, m);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("ZZZZ", 4);
    f.close();
    CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint(path, spec)),
                         doctest::Contains("magic"), Error);
  }
  SUBCASE("truncated payload") {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 5));
    out.close();
    CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint(path, spec)),
                         doctest::Contains("truncated"), Error);
  }
  SUBCASE("trailing bytes") {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out.write("x", 1);
    out.close();
    CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint(path, spec)),
                         doctest::Contains("trailing"), Error);
  }
  SUBCASE("layer table mismatch") {
    CHECK_THROWS_AS(
        static_cast<void>(load_checkpoint(path, dense_ae_spec(4, 3))), Error);
  }
  std::remove(path.c_str());
}

TEST_CASE("model spec validation rejects broken chains") {
  ModelSpec s;
  s.kind = ModelKind::dense_ae;
  s.input_shape = {4};
  s.layers = {{LayerKind::dense, 4, 2, 0}, {LayerKind::dense, 3, 4, 0}};
  s.latent_layer = 0;
  CHECK_THROWS_AS(s.validate(), Error);
  CHECK_THROWS_AS(static_cast<void>(classifier_spec(4, 2, 1)), Error);
}
