#include "mmx/model.hpp"

#include <cmath>

#include "mmx/rng.hpp"

namespace mmx {

namespace {

bool layer_has_params(LayerKind k) {
  return k == LayerKind::dense || k == LayerKind::conv2d;
}

// walks the layer chain and returns the output shape, throwing on any
// composition break
std::vector<int> chain_shape(const ModelSpec& spec) {
  std::vector<int> cur = spec.input_shape;
  bool flat = !spec.image_input();
  int li = 0;
  for (const LayerSpec& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::dense:
        if (!flat || cur.size() != 1)
          throw Error("model: dense layer " + std::to_string(li) +
                      " needs a flat input");
        if (cur[0] != l.in)
          throw Error("model: dense layer " + std::to_string(li) + " expects " +
                      std::to_string(l.in) + " features, got " +
                      std::to_string(cur[0]));
        if (l.out <= 0) throw Error("model: dense layer width must be positive");
        cur = {l.out};
        break;
      case LayerKind::conv2d:
        if (flat || cur.size() != 3)
          throw Error("model: conv layer " + std::to_string(li) +
                      " needs an image input");
        if (cur[0] != l.in)
          throw Error("model: conv layer " + std::to_string(li) + " expects " +
                      std::to_string(l.in) + " channels, got " +
                      std::to_string(cur[0]));
        if (l.out <= 0 || l.ksize <= 0 || l.ksize % 2 == 0)
          throw Error("model: conv layer needs positive filters and odd kernel");
        cur = {l.out, cur[1], cur[2]};
        break;
      case LayerKind::relu:
      case LayerKind::sigmoid:
        break;
      case LayerKind::maxpool2:
        if (flat || cur.size() != 3 || cur[1] % 2 != 0 || cur[2] % 2 != 0)
          throw Error("model: maxpool2 layer " + std::to_string(li) +
                      " needs even image dims");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::upsample2:
        if (flat || cur.size() != 3)
          throw Error("model: upsample2 layer " + std::to_string(li) +
                      " needs an image input");
        cur = {cur[0], cur[1] * 2, cur[2] * 2};
        break;
    }
    ++li;
  }
  return cur;
}

}  // namespace

void ModelSpec::validate() const {
  if (layers.empty()) throw Error("model: no layers");
  if (input_shape.size() != 1 && input_shape.size() != 3)
    throw Error("model: input shape must be {d} or {c,h,w}");
  for (int d : input_shape)
    if (d <= 0) throw Error("model: non-positive input dim");
  if (lambda1 < 0) throw Error("model: negative sparsity coefficient");
  std::vector<int> out = chain_shape(*this);
  bool is_ae = kind == ModelKind::dense_ae || kind == ModelKind::sparse_ae ||
               kind == ModelKind::conv_ae;
  if (is_ae) {
    if (out != input_shape)
      throw Error("model: autoencoder output shape " + shape_str(out) +
                  " does not match input " + shape_str(input_shape));
    if (latent_layer < 0 || latent_layer >= static_cast<int>(layers.size()))
      throw Error("model: autoencoder needs a latent layer index");
  }
  if (kind == ModelKind::classifier) {
    if (out.size() != 1 || out[0] != class_count || class_count < 2)
      throw Error("model: classifier output must match the class count");
  }
  if (kind == ModelKind::mine_statistics) {
    if (out.size() != 1 || out[0] != 1)
      throw Error("model: statistics net must end in a scalar");
  }
}

ModelSpec dense_ae_spec(int input_dim, int latent) {
  ModelSpec s;
  s.kind = ModelKind::dense_ae;
  s.input_shape = {input_dim};
  s.layers = {{LayerKind::dense, input_dim, latent, 0},
              {LayerKind::relu, 0, 0, 0},
              {LayerKind::dense, latent, input_dim, 0},
              {LayerKind::sigmoid, 0, 0, 0}};
  s.latent_layer = 1;
  s.validate();
  return s;
}

ModelSpec sparse_ae_spec(int input_dim, int latent, double lambda1) {
  ModelSpec s = dense_ae_spec(input_dim, latent);
  s.kind = ModelKind::sparse_ae;
  s.lambda1 = lambda1;
  s.validate();
  return s;
}

ModelSpec conv_ae_spec(int in_c, int h, int w, int filters) {
  ModelSpec s;
  s.kind = ModelKind::conv_ae;
  s.input_shape = {in_c, h, w};
  s.layers = {{LayerKind::conv2d, in_c, filters, 3},
              {LayerKind::relu, 0, 0, 0},
              {LayerKind::maxpool2, 0, 0, 0},
              {LayerKind::conv2d, filters, filters, 3},
              {LayerKind::relu, 0, 0, 0},
              {LayerKind::maxpool2, 0, 0, 0},
              {LayerKind::upsample2, 0, 0, 0},
              {LayerKind::conv2d, filters, filters, 3},
              {LayerKind::relu, 0, 0, 0},
              {LayerKind::upsample2, 0, 0, 0},
              {LayerKind::conv2d, filters, in_c, 3},
              {LayerKind::sigmoid, 0, 0, 0}};
  s.latent_layer = 5;
  s.validate();
  return s;
}

ModelSpec classifier_spec(int input_dim, int hidden, int classes) {
  ModelSpec s;
  s.kind = ModelKind::classifier;
  s.input_shape = {input_dim};
  s.class_count = classes;
  if (hidden > 0) {
    s.layers = {{LayerKind::dense, input_dim, hidden, 0},
                {LayerKind::relu, 0, 0, 0},
                {LayerKind::dense, hidden, classes, 0}};
  } else {
    s.layers = {{LayerKind::dense, input_dim, classes, 0}};
  }
  s.validate();
  return s;
}

ModelSpec statistics_net_spec(int pair_dim, const std::vector<int>& hidden) {
  ModelSpec s;
  s.kind = ModelKind::mine_statistics;
  s.input_shape = {2 * pair_dim};
  int cur = 2 * pair_dim;
  for (int hwidth : hidden) {
    s.layers.push_back({LayerKind::dense, cur, hwidth, 0});
    s.layers.push_back({LayerKind::relu, 0, 0, 0});
    cur = hwidth;
  }
  s.layers.push_back({LayerKind::dense, cur, 1, 0});
  s.validate();
  return s;
}

std::vector<std::vector<int>> param_shapes(const ModelSpec& spec) {
  std::vector<std::vector<int>> shapes;
  for (const LayerSpec& l : spec.layers) {
    if (l.kind == LayerKind::dense) {
      shapes.push_back({l.in, l.out});
      shapes.push_back({l.out});
    } else if (l.kind == LayerKind::conv2d) {
      shapes.push_back({l.out, l.in, l.ksize, l.ksize});
      shapes.push_back({l.out});
    }
  }
  return shapes;
}

int param_count(const ModelSpec& spec) {
  return static_cast<int>(param_shapes(spec).size());
}

std::vector<int> weight_slot(const ModelSpec& spec) {
  std::vector<int> slot;
  int next = 0;
  for (const LayerSpec& l : spec.layers) {
    if (layer_has_params(l.kind)) {
      slot.push_back(next);
      next += 2;
    } else {
      slot.push_back(-1);
    }
  }
  return slot;
}

std::vector<Tensor> init_params(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::vector<Tensor> params;
  for (const LayerSpec& l : spec.layers) {
    if (!layer_has_params(l.kind)) continue;
    int fan_in, fan_out;
    std::vector<int> wshape;
    if (l.kind == LayerKind::dense) {
      fan_in = l.in;
      fan_out = l.out;
      wshape = {l.in, l.out};
    } else {
      fan_in = l.in * l.ksize * l.ksize;
      fan_out = l.out * l.ksize * l.ksize;
      wshape = {l.out, l.in, l.ksize, l.ksize};
    }
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor w(wshape);
    for (int i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-a, a);
    params.push_back(std::move(w));
    params.push_back(Tensor::zeros({l.out}));
  }
  return params;
}

ModelState make_model(const ModelSpec& spec, uint64_t seed) {
  ModelState m;
  m.spec = spec;
  m.params = init_params(spec, seed);
  m.seed = seed;
  return m;
}

std::vector<Tape::Var> borrow_params(Tape& t, const ModelState& m) {
  std::vector<Tape::Var> v;
  v.reserve(m.params.size());
  for (const Tensor& p : m.params) v.push_back(t.borrow_param(&p));
  return v;
}

std::vector<Tape::Var> borrow_params_const(Tape& t, const ModelState& m) {
  std::vector<Tape::Var> v;
  v.reserve(m.params.size());
  for (const Tensor& p : m.params) v.push_back(t.borrow_const(&p));
  return v;
}

Tape::Var forward_layers(Tape& t, const ModelSpec& spec,
                         const std::vector<Tape::Var>& params, Tape::Var x,
                         int begin, int end) {
  std::vector<int> slot = weight_slot(spec);
  Tape::Var h = x;
  for (int l = begin; l < end; ++l) {
    const LayerSpec& ls = spec.layers[static_cast<size_t>(l)];
    int s = slot[static_cast<size_t>(l)];
    switch (ls.kind) {
      case LayerKind::dense:
        h = t.add_rowvec(t.matmul(h, params[static_cast<size_t>(s)]),
                         params[static_cast<size_t>(s + 1)]);
        break;
      case LayerKind::conv2d:
        h = t.add_chanvec(t.conv2d(h, params[static_cast<size_t>(s)],
                                   Padding::same),
                          params[static_cast<size_t>(s + 1)]);
        break;
      case LayerKind::relu:
        h = t.relu(h);
        break;
      case LayerKind::sigmoid:
        h = t.sigmoid(h);
        break;
      case LayerKind::maxpool2:
        h = t.maxpool2(h);
        break;
      case LayerKind::upsample2:
        h = t.upsample2(h);
        break;
    }
  }
  return h;
}

ForwardResult model_forward(Tape& t, const ModelSpec& spec,
                            const std::vector<Tape::Var>& params, Tape::Var x) {
  ForwardResult r;
  int n = static_cast<int>(spec.layers.size());
  if (spec.latent_layer >= 0) {
    r.latent = forward_layers(t, spec, params, x, 0, spec.latent_layer + 1);
    r.out = forward_layers(t, spec, params, r.latent, spec.latent_layer + 1, n);
  } else {
    r.out = forward_layers(t, spec, params, x, 0, n);
  }
  return r;
}

Tensor batch_input(const ModelSpec& spec, const Dataset& data,
                   const std::vector<int>& idx) {
  if (idx.empty()) throw Error("batch_input: empty index set");
  int per = data.samples[0].numel();
  if (per != spec.input_numel())
    throw Error("batch_input: sample size " + std::to_string(per) +
                " does not match model input " +
                std::to_string(spec.input_numel()));
  std::vector<int> shape;
  shape.push_back(static_cast<int>(idx.size()));
  for (int d : spec.input_shape) shape.push_back(d);
  Tensor out(shape);
  for (size_t r = 0; r < idx.size(); ++r) {
    const Tensor& s = data.samples[static_cast<size_t>(idx[r])];
    if (s.numel() != per) throw Error("batch_input: ragged sample shapes");
    std::copy(s.data.begin(), s.data.end(),
              out.data.begin() + static_cast<long>(r) * per);
  }
  return out;
}

Tensor as_batch(const ModelSpec& spec, const Tensor& x) {
  int per = spec.input_numel();
  std::vector<int> shape;
  if (x.numel() == per) {
    shape.push_back(1);
  } else if (x.ndim() >= 2 && x.numel() == x.dim(0) * per) {
    shape.push_back(x.dim(0));
  } else {
    throw Error("model: input shape " + shape_str(x.shape) +
                " does not match model input " + shape_str(spec.input_shape));
  }
  for (int d : spec.input_shape) shape.push_back(d);
  Tensor out = x;
  out.shape = shape;
  return out;
}

Tensor ae_forward(const ModelState& m, const Tensor& x) {
  bool is_ae = m.spec.kind == ModelKind::dense_ae ||
               m.spec.kind == ModelKind::sparse_ae ||
               m.spec.kind == ModelKind::conv_ae;
  if (!is_ae) throw Error("ae_forward: model is not an autoencoder");
  Tensor xb = as_batch(m.spec, x);
  Tape t;
  std::vector<Tape::Var> params = borrow_params_const(t, m);
  ForwardResult fr = model_forward(t, m.spec, params, t.constant(xb));
  Tensor out = t.val(fr.out);
  out.shape = x.shape;
  return out;
}

double recon_loss(const Tensor& x, const Tensor& xhat) {
  if (!x.same_shape(xhat))
    throw Error("recon_loss: shape mismatch " + shape_str(x.shape) + " vs " +
                shape_str(xhat.shape));
  double acc = 0;
  for (int i = 0; i < x.numel(); ++i) {
    double d = x[i] - xhat[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

Tensor classifier_logits(const ModelState& m, const Tensor& x) {
  if (m.spec.kind != ModelKind::classifier)
    throw Error("classifier_logits: model is not a classifier");
  Tensor xb = as_batch(m.spec, x);
  Tape t;
  std::vector<Tape::Var> params = borrow_params_const(t, m);
  ForwardResult fr = model_forward(t, m.spec, params, t.constant(xb));
  Tensor out = t.val(fr.out);
  if (x.numel() == m.spec.input_numel()) out.shape = {m.spec.class_count};
  return out;
}

namespace {

Tensor onehot_rows(const Dataset& data, const std::vector<int>& idx,
                   int classes) {
  Tensor y = Tensor::zeros({static_cast<int>(idx.size()), classes});
  for (size_t r = 0; r < idx.size(); ++r) {
    int lab = data.labels[static_cast<size_t>(idx[r])];
    if (lab < 0 || lab >= classes)
      throw Error("train_model: label " + std::to_string(lab) +
                  " outside class range");
    y[static_cast<int>(r) * classes + lab] = 1.0;
  }
  return y;
}

// training objective of one batch on a fresh tape
Tape::Var batch_objective(Tape& t, const ModelSpec& spec,
                          const std::vector<Tape::Var>& params,
                          const Tensor& xb, const Tensor* onehot) {
  Tape::Var x = t.constant(xb);
  ForwardResult fr = model_forward(t, spec, params, x);
  if (spec.kind == ModelKind::classifier)
    return t.xent_logits(fr.out, t.constant(*onehot));
  Tape::Var diff = t.sub(fr.out, x);
  Tape::Var loss = t.mean(t.mul(diff, diff));
  if (spec.kind == ModelKind::sparse_ae && spec.lambda1 != 0.0) {
    int latent_numel = t.val(fr.latent).numel();
    Tape::Var sparsity =
        t.affine(t.l1_norm(fr.latent), spec.lambda1 / latent_numel, 0.0);
    loss = t.add(loss, sparsity);
  }
  return loss;
}

}  // namespace

double model_objective(const ModelState& m, const Dataset& data) {
  if (data.size() == 0) throw Error("model_objective: empty dataset");
  const int chunk = 256;
  double acc = 0;
  for (int start = 0; start < data.size(); start += chunk) {
    std::vector<int> idx;
    for (int i = start; i < std::min(start + chunk, data.size()); ++i)
      idx.push_back(i);
    Tensor xb = batch_input(m.spec, data, idx);
    Tensor onehot;
    if (m.spec.kind == ModelKind::classifier) {
      if (!data.has_labels()) throw Error("model_objective: labels required");
      onehot = onehot_rows(data, idx, m.spec.class_count);
    }
    Tape t;
    std::vector<Tape::Var> params = borrow_params_const(t, m);
    Tape::Var loss = batch_objective(t, m.spec, params, xb, &onehot);
    acc += t.val(loss)[0] * static_cast<double>(idx.size());
  }
  return acc / data.size();
}

double dataset_mse(const ModelState& m, const Dataset& data) {
  if (data.size() == 0) throw Error("dataset_mse: empty dataset");
  double acc = 0;
  for (const Tensor& s : data.samples) {
    Tensor rec = ae_forward(m, s);
    double sq = 0;
    for (int i = 0; i < s.numel(); ++i) {
      double d = s[i] - rec[i];
      sq += d * d;
    }
    acc += sq / s.numel();
  }
  return acc / data.size();
}

ModelState train_model(const ModelSpec& spec, const Dataset& data,
                       const TrainConfig& cfg) {
  spec.validate();
  data.validate();
  if (data.size() == 0) throw Error("train_model: empty dataset");
  if (spec.kind == ModelKind::mine_statistics)
    throw Error("train_model: statistics nets are trained by the estimator");
  if (spec.kind == ModelKind::classifier && !data.has_labels())
    throw Error("train_model: classifier training needs labels");
  if (cfg.batch <= 0 || cfg.epochs < 0)
    throw Error("train_model: bad batch size or epoch count");

  ModelState m = make_model(spec, sub_seed(cfg.seed, "model-init"));
  m.seed = cfg.seed;
  OptimizerState opt = make_optimizer(cfg.opt, cfg.lr);
  Rng shuffle_rng(sub_seed(cfg.seed, "train-shuffle"));

  std::vector<Tensor*> param_ptrs;
  for (Tensor& p : m.params) param_ptrs.push_back(&p);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = shuffle_rng.permutation(data.size());
    double acc = 0;
    for (int start = 0; start < data.size(); start += cfg.batch) {
      std::vector<int> idx(
          order.begin() + start,
          order.begin() + std::min(start + cfg.batch, data.size()));
      Tensor xb = batch_input(spec, data, idx);
      Tensor onehot;
      if (spec.kind == ModelKind::classifier)
        onehot = onehot_rows(data, idx, spec.class_count);
      try {
        Tape t;
        std::vector<Tape::Var> params = borrow_params(t, m);
        Tape::Var loss = batch_objective(t, spec, params, xb, &onehot);
        t.backward(loss);
        std::vector<const Tensor*> grads;
        grads.reserve(params.size());
        for (Tape::Var v : params) grads.push_back(&t.grad(v));
        optimizer_step(opt, param_ptrs, grads);
        acc += t.val(loss)[0] * static_cast<double>(idx.size());
      } catch (const Error& e) {
        throw Error("train_model: diverged at epoch " + std::to_string(epoch) +
                    ", batch offset " + std::to_string(start) + ": " +
                    e.what());
      }
    }
    m.epoch_loss.push_back(acc / data.size());
  }
  m.epochs_run = cfg.epochs;
  m.final_loss = model_objective(m, data);
  return m;
}

const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::dense_ae: return "dense-ae";
    case ModelKind::sparse_ae: return "sparse-ae";
    case ModelKind::conv_ae: return "conv-ae";
    case ModelKind::classifier: return "classifier";
    case ModelKind::mine_statistics: return "mine-statistics";
  }
  throw Error("model: unknown kind");
}

ModelKind model_kind_from_name(const std::string& s) {
  if (s == "dense-ae") return ModelKind::dense_ae;
  if (s == "sparse-ae") return ModelKind::sparse_ae;
  if (s == "conv-ae") return ModelKind::conv_ae;
  if (s == "classifier") return ModelKind::classifier;
  if (s == "mine-statistics") return ModelKind::mine_statistics;
  throw Error("model: unknown kind name " + s);
}

}  // namespace mmx
