#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mmx/dataset.hpp"
#include "mmx/optim.hpp"
#include "mmx/tensor.hpp"

namespace mmx {

// Kind tags are stable: they are written verbatim into checkpoint files.
enum class LayerKind : uint32_t {
  dense = 1,
  conv2d = 2,
  relu = 3,
  sigmoid = 4,
  maxpool2 = 5,
  upsample2 = 6,
};

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in = 0;     // dense: input features; conv2d: input channels
  int out = 0;    // dense: output features; conv2d: filters
  int ksize = 0;  // conv2d only; odd, same padding
};

enum class ModelKind {
  dense_ae,
  sparse_ae,
  conv_ae,
  classifier,
  mine_statistics,
};

struct ModelSpec {
  ModelKind kind = ModelKind::dense_ae;
  std::vector<LayerSpec> layers;
  std::vector<int> input_shape;  // flat models {d}; image models {c,h,w}
  int latent_layer = -1;         // autoencoders: layer whose output is the code
  double lambda1 = 0.0;          // sparse-ae L1 coefficient, >= 0
  int class_count = 0;           // classifier only

  void validate() const;
  int input_numel() const { return numel_of(input_shape); }
  bool image_input() const { return input_shape.size() == 3; }
};

// spec builders; architecture defaults live in the config layer
ModelSpec dense_ae_spec(int input_dim, int latent);
ModelSpec sparse_ae_spec(int input_dim, int latent, double lambda1);
ModelSpec conv_ae_spec(int in_c, int h, int w, int filters);
ModelSpec classifier_spec(int input_dim, int hidden, int classes);
ModelSpec statistics_net_spec(int pair_dim, const std::vector<int>& hidden);

// parameter slots: dense and conv2d layers contribute W then b, in layer order
int param_count(const ModelSpec& spec);
std::vector<std::vector<int>> param_shapes(const ModelSpec& spec);
// index into the flat param vector of layer l's weight slot, -1 if none
std::vector<int> weight_slot(const ModelSpec& spec);

struct ModelState {
  ModelSpec spec;
  std::vector<Tensor> params;
  int epochs_run = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> epoch_loss;  // mean training objective per epoch
  uint64_t seed = 0;
};

// uniform fan-based initialization, biases zero, deterministic in seed
std::vector<Tensor> init_params(const ModelSpec& spec, uint64_t seed);
ModelState make_model(const ModelSpec& spec, uint64_t seed);

// tape plumbing ------------------------------------------------------------

std::vector<Tape::Var> borrow_params(Tape& t, const ModelState& m);
std::vector<Tape::Var> borrow_params_const(Tape& t, const ModelState& m);

// runs layers [begin,end) on x; x is [n,d] for flat models, [n,c,h,w] for
// image models
Tape::Var forward_layers(Tape& t, const ModelSpec& spec,
                         const std::vector<Tape::Var>& params, Tape::Var x,
                         int begin, int end);

struct ForwardResult {
  Tape::Var out;
  Tape::Var latent;  // ok() only when the spec declares a latent layer
};
ForwardResult model_forward(Tape& t, const ModelSpec& spec,
                            const std::vector<Tape::Var>& params, Tape::Var x);

// batch assembly: [B, d] or [B, c, h, w] depending on the spec input shape
Tensor batch_input(const ModelSpec& spec, const Dataset& data,
                   const std::vector<int>& idx);
// accepts {d}, {n,d}, {c,h,w} or {n,c,h,w}; result matches the spec batch form
Tensor as_batch(const ModelSpec& spec, const Tensor& x);

// inference ----------------------------------------------------------------

// reconstruction with the same shape as x (single sample or batch)
Tensor ae_forward(const ModelState& m, const Tensor& x);
// plain Euclidean norm of the difference, the scalar the attack criterion uses
double recon_loss(const Tensor& x, const Tensor& xhat);
// pre-softmax scores, one row per sample; single sample gives a flat vector
Tensor classifier_logits(const ModelState& m, const Tensor& x);

// training -----------------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  int batch = 64;
  OptKind opt = OptKind::adam;
  double lr = 1e-3;
  uint64_t seed = 0;
};

// AE objective: mean over samples of per-element squared error, plus
// lambda1 * mean absolute latent activation for sparse models.
// Classifier objective: mean softmax cross-entropy.
double model_objective(const ModelState& m, const Dataset& data);
// mean over samples of per-sample mean squared reconstruction error
double dataset_mse(const ModelState& m, const Dataset& data);

ModelState train_model(const ModelSpec& spec, const Dataset& data,
                       const TrainConfig& cfg);

const char* model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& s);

}  // namespace mmx
