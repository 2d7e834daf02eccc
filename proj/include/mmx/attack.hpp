#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mmx/mine.hpp"
#include "mmx/model.hpp"
#include "mmx/tensor.hpp"

namespace mmx {

// Attack success convention throughout: f(x + delta) <= 0.
enum class CriterionKind { sup_untargeted, sup_targeted, unsup_recon, custom_loss };

// Builds the scalar criterion node on a tape. xpd is the perturbed sample as
// a [1, d] row; x is the unperturbed sample in its native shape.
using CustomLoss = std::function<Tape::Var(Tape&, Tape::Var xpd, const Tensor& x)>;

struct AttackCriterion {
  CriterionKind kind = CriterionKind::custom_loss;
  double kappa = 0.0;
  int label = -1;  // true label (untargeted) or target label (targeted)
  const ModelState* model = nullptr;
  double baseline = 0.0;  // cached ||x - Phi(x)||_2, unsup only
  CustomLoss custom;
};

AttackCriterion sup_untargeted_criterion(const ModelState& m, int label,
                                         double kappa = 0.0);
AttackCriterion sup_targeted_criterion(const ModelState& m, int target,
                                       double kappa = 0.0);
// caches ||x - Phi(x)||_2 for this sample once, at construction
AttackCriterion unsup_recon_criterion(const ModelState& m, const Tensor& x,
                                      double kappa = 0.0);
AttackCriterion custom_criterion(CustomLoss fn, double kappa = 0.0);

// scalar criterion forms
double f_sup_untargeted(const Tensor& logits, int label, double kappa);
double f_sup_targeted(const Tensor& logits, int target, double kappa);
double f_unsup(const Tensor& x, const Tensor& delta, const ModelState& m,
               double kappa);

// criterion node on an external tape; the model referenced by crit must
// outlive the tape
Tape::Var criterion_on_tape(Tape& t, const AttackCriterion& crit,
                            const Tensor& x, Tape::Var xpd);
// independent re-evaluation of the criterion at x + delta
double criterion_value(const AttackCriterion& crit, const Tensor& x,
                       const Tensor& delta);

struct Hinge {
  double fplus = 0.0;
  bool gate_open = false;  // the gradient of f+ passes only when f > 0
};
Hinge hinge(double f);

// clip delta to [-eps, eps], then clip x + delta to [0, 1], in that order
Tensor project_box(const Tensor& delta, const Tensor& x, double eps);

// c_{t+1} = (1 - beta / t^{1/4}) c_t + beta * fplus, clamped to [0, cbar]
double c_update(double c, int t, double beta, double fplus, double cbar);

// maximize: supervised attacks keep the perturbed sample similar (high MI);
// minimize: unsupervised attacks push it dissimilar (low MI)
enum class MiDirection { maximize, minimize };
// mine: per-sample MINE bound; l2/cosine_feature: distances between feature
// maps in place of the MINE term; recon_l2: the reconstruction distance
// ||x - Phi(x+delta)||_2 itself as the dissimilarity objective
enum class Similarity { mine, l2_feature, cosine_feature, recon_l2 };

const char* direction_name(MiDirection d);
MiDirection direction_from_name(const std::string& s);
const char* similarity_name(Similarity s);
Similarity similarity_from_name(const std::string& s);

struct AttackConfig {
  double alpha = 0.01;  // outer (delta) step size
  double beta = 0.1;    // inner (c) step size
  int T = 40;
  double eps = 1.0;  // L-inf bound; 1 disables the constraint effectively
  MiDirection direction = MiDirection::minimize;
  Similarity similarity = Similarity::mine;
  MiConfig mi;  // mi.seed is overridden; the attack seeds everything from seed
  double cbar = 1e6;
  uint64_t seed = 0;
};

struct TraceRow {
  int t = 0;
  double f = 0.0;    // f(x + delta_{t+1})
  double c = 0.0;    // c_t used in this iteration's gradient step
  double mi = 0.0;   // similarity estimate at (x, x + delta_{t+1})
  double stationarity_sq = 0.0;  // ||L(delta_t, c_t)||^2
};

struct AttackResult {
  bool success = false;
  Tensor delta_star;  // shaped like x; empty when no iterate succeeded
  // objective-direction similarity at the best iterate: equals best_mi when
  // maximizing and -best_mi when minimizing
  double best_obj = -std::numeric_limits<double>::infinity();
  double best_mi = std::numeric_limits<double>::quiet_NaN();
  std::vector<TraceRow> trace;
  double wallclock_ms = 0.0;
};

AttackResult minmax_attack(const Tensor& x, const AttackCriterion& crit,
                           const AttackConfig& cfg);

// fixed-c baseline: B binary-search steps over c, T_prime iterations each
struct PenaltySchedule {
  int B = 9;
  int T_prime = 100;
  double lb = 1e-3, ub = 1e9, c0 = 1e-3;
};

AttackResult penalty_attack(const Tensor& x, const AttackCriterion& crit,
                            const AttackConfig& cfg,
                            const PenaltySchedule& sched);

// squared norm of the projected-gradient residual
// [delta - P(delta - grad_delta_f), c - clamp(c + grad_c_f, 0, cbar)]
// where P is the sequential box projection around x
double stationarity(const Tensor& delta, double c, const Tensor& grad_delta_f,
                    double grad_c_f, double eps, const Tensor& x, double cbar);

// l2: Euclidean distance; cosine: 1 - cos angle, defined as 1 when either
// vector is zero
double alt_similarity(const Tensor& fx, const Tensor& fxpd, Similarity kind);

struct BatchPlan {
  AttackConfig cfg;  // cfg.seed is the root; sample i uses stream "attack:i"
  bool penalty = false;
  PenaltySchedule schedule;
  int n_workers = 1;
};

using CriterionFactory = std::function<AttackCriterion(int, const Tensor&)>;

// results are indexed like xs and independent of n_workers
std::vector<AttackResult> attack_batch(const std::vector<Tensor>& xs,
                                       const CriterionFactory& criterion_for,
                                       const BatchPlan& plan);

struct SummaryRow {
  int sample_id = 0;
  bool success = false;
  double best_mi = std::numeric_limits<double>::quiet_NaN();
  int iters = 0;
  double wallclock_ms = 0.0;
};
SummaryRow summarize(int sample_id, const AttackResult& r);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& rows);
void write_summary_csv(const std::string& path,
                       const std::vector<SummaryRow>& rows);

}  // namespace mmx
