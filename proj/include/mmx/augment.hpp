#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mmx/attack.hpp"
#include "mmx/dataset.hpp"
#include "mmx/model.hpp"

namespace mmx {

// adversarial methods run the configured attack per sample; the rest apply
// classical perturbations
enum class AugmentMethod {
  mine_uae,
  l2_uae,
  gaussian,
  flip,
  rotation,
  flip_rotation,
};

const char* augment_method_name(AugmentMethod m);
AugmentMethod augment_method_from_name(const std::string& s);

struct GeometricOptions {
  bool hflip = true;
  bool vflip = true;
  double rotation_deg = 10.0;  // 0 disables the rotation transform
};

struct AugmentationPlan {
  AugmentMethod method = AugmentMethod::mine_uae;
  double sigma = 0.01;        // gaussian noise scale
  double rotation_deg = 10.0; // rotation methods
  AttackConfig attack;        // adversarial methods; T = 0 disables the attack
  int n_workers = 1;
  TrainConfig retrain;        // base recipe; epochs scaled by retrain_epoch_ratio
  double retrain_epoch_ratio = 1.5;
  uint64_t seed = 0;          // root for the attack, noise, and retrain streams
};

// Every augmentation op returns the full retraining set: the N originals in
// order followed by one augmented entry (or verbatim copy) per original, so
// the result always has size 2N.

struct UaeSet {
  Dataset augmented;
  double asr = 0.0;
  std::vector<SummaryRow> records;  // one row per original sample
};

// per-sample attack with the reconstruction criterion at kappa = 0; success
// appends x + delta*, failure appends a copy of x
UaeSet generate_uae_set(const Dataset& train, const ModelState& model,
                        const AugmentationPlan& plan);

// x + n with n ~ N(0, sigma^2 I), clipped to [0,1]
Dataset gaussian_augment(const Dataset& train, double sigma, uint64_t seed);

// per-sample uniform choice among the enabled transforms
Dataset geometric_augment(const Dataset& train, const GeometricOptions& opt,
                          uint64_t seed);

// primitive transforms on {h,w} or {c,h,w} samples
Tensor hflip_image(const Tensor& x);
Tensor vflip_image(const Tensor& x);
// nearest-neighbor resample around the image center; source reads outside
// the grid produce zero
Tensor rotate_image(const Tensor& x, double deg);

// fraction of pairs with adv <= orig - kappa; the boundary counts as success
double asr(const std::vector<double>& orig_losses,
           const std::vector<double>& adv_losses, double kappa);

struct AugmentationReport {
  std::string method;
  double asr = std::numeric_limits<double>::quiet_NaN();  // attack methods only
  double orig_train_loss = 0.0;
  double retrain_train_loss = 0.0;
  double orig_test_err = 0.0;
  double retrain_test_err = 0.0;
  // (orig - new) / orig on the test error, in percent, relative to the
  // original model
  double improvement_pct = 0.0;
  double gen_ms = 0.0;
  double retrain_ms = 0.0;
  double eval_ms = 0.0;
  uint64_t seed = 0;
  uint64_t retrain_seed = 0;
};

struct RetrainResult {
  ModelState model;
  AugmentationReport report;
};

// trains original.spec from scratch on the augmented set with a fresh
// initialization seed and cfg.epochs scaled by epoch_ratio, then fills the
// before/after metrics; train/test are the original splits
RetrainResult retrain_and_eval(const ModelState& original, const Dataset& train,
                               const Dataset& augmented, const Dataset& test,
                               const TrainConfig& cfg, double epoch_ratio,
                               uint64_t seed);

struct AugmentationRun {
  Dataset augmented;
  std::vector<SummaryRow> records;  // empty for non-attack methods
  ModelState retrained;
  AugmentationReport report;
};

// one full pipeline pass: generate per plan.method, retrain, evaluate
AugmentationRun run_augmentation(const Dataset& train, const Dataset& test,
                                 const ModelState& model,
                                 const AugmentationPlan& plan);

// flat key=value serialization
void write_report(const std::string& path, const AugmentationReport& r);
// appends one CSV row, writing the header first when the file is new or empty
void append_report_csv(const std::string& path, const AugmentationReport& r);

}  // namespace mmx
