#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmx/attack.hpp"
#include "mmx/augment.hpp"
#include "mmx/dataset.hpp"
#include "mmx/mine.hpp"
#include "mmx/model.hpp"

namespace mmx {

// Flat sectioned key = value document. Parsing rejects unknown sections and
// keys; serialization emits every field in a fixed order so the persisted
// resolved config echoes defaults and diffs cleanly. parse(serialize(c))
// reproduces c exactly (doubles round-trip at full precision).

struct RunSection {
  uint64_t seed = 0;
  std::string out = "out";
  std::string id;  // empty derives a deterministic id from the config
};

struct DataSection {
  std::string source = "synth-digits";  // synth-digits | idx | csv
  std::string train;
  std::string train_labels;
  std::string test;
  std::string test_labels;
  int train_count = 5000;  // synthetic source
  int test_count = 1000;
  int csv_label_col = -1;
  bool csv_header = false;
  bool csv_normalize = true;  // min-max from train statistics only
};

struct ModelSection {
  std::string kind = "dense-ae";  // dense-ae | sparse-ae | conv-ae | classifier
  int latent = 128;
  int hidden = 64;     // classifier hidden width, 0 for linear
  int filters = 16;    // conv-ae filters per conv layer
  double lambda1 = 1e-3;
  int epochs = 10;
  int batch = 64;
  std::string opt = "adam";  // adam | sgd
  double lr = 1e-3;
  std::string checkpoint;  // load parameters instead of training when set
};

struct AttackSection {
  std::string mode = "minmax";            // minmax | penalty
  std::string criterion = "unsup-recon";  // sup-untargeted | sup-targeted |
                                          // unsup-recon
  double kappa = 0.0;
  int label = 0;  // sup-targeted target class
  double alpha = 0.01;
  double beta = 0.1;
  int T = 40;
  double eps = 1.0;
  std::string direction = "minimize-mi";
  std::string similarity = "mine";
  double cbar = 1e6;
  int sample = -1;  // -1 attacks the whole set; otherwise one index
  int count = 0;    // when positive, only the first count samples
  int workers = 1;
  int penalty_B = 9;
  int penalty_T_prime = 100;
};

struct MineSection {
  std::string scheme = "bank";  // bank | conv
  int K = 500;
  int dprime = 128;
  std::vector<int> hidden = {100, 100};
  double lr = 1e-4;
  int t_inner = 10;
};

struct AugmentSection {
  std::string method = "mine-uae";
  double sigma = 0.01;
  double rotation_deg = 10.0;
  double retrain_epoch_ratio = 1.5;
};

struct CalibrateSection {
  double rho = 0.9;
  int dim = 20;
  int n = 500;
  int steps = 5000;
  int batch_K = 128;
  double lr = 2e-3;
  int reps = 8;            // full-set evaluations averaged for the estimate
  double tolerance = 0.2;  // relative error gate; <= 0 disables
};

struct RunConfig {
  RunSection run;
  DataSection data;
  ModelSection model;
  AttackSection attack;
  MineSection mine;
  AugmentSection augment;
  CalibrateSection calibrate;
};

RunConfig parse_config(const std::string& text);
RunConfig parse_config_file(const std::string& path);
std::string serialize_config(const RunConfig& cfg);
void write_config(const std::string& path, const RunConfig& cfg);

// <command>-<hex digest of the serialized config>, stable across reruns
std::string derive_run_id(const std::string& command, const RunConfig& cfg);

// dataset assembly per [data]; applies csv normalization fitted on train
struct SplitData {
  Dataset train;
  Dataset test;
};
SplitData build_datasets(const RunConfig& cfg);

// [model] resolved against the sample shape (and labels for classifiers)
ModelSpec model_spec_from(const RunConfig& cfg, const Dataset& train);
TrainConfig train_config_from(const RunConfig& cfg);
// trains fresh or loads model.checkpoint when set
ModelState obtain_model(const RunConfig& cfg, const Dataset& train);

AttackConfig attack_config_from(const RunConfig& cfg);
PenaltySchedule penalty_schedule_from(const RunConfig& cfg);
MiConfig mi_config_from(const RunConfig& cfg);
AugmentationPlan augmentation_plan_from(const RunConfig& cfg);

}  // namespace mmx
