#include "mmx/attack.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mmx/rng.hpp"
#include "mmx/textio.hpp"

namespace mmx {

namespace {

Tensor flat_row(const Tensor& x) {
  Tensor r = x;
  r.shape = {1, x.numel()};
  return r;
}

std::vector<int> batch1_shape(const ModelSpec& spec) {
  std::vector<int> s = {1};
  for (int d : spec.input_shape) s.push_back(d);
  return s;
}

Tape::Var shaped_for_model(Tape& t, const ModelSpec& spec, Tape::Var row) {
  return t.reshape(row, batch1_shape(spec));
}

void require_model(const AttackCriterion& crit, const char* who) {
  if (!crit.model) throw Error(std::string(who) + ": criterion has no model");
}

void require_ae(const ModelState& m, const char* who) {
  bool is_ae = m.spec.kind == ModelKind::dense_ae ||
               m.spec.kind == ModelKind::sparse_ae ||
               m.spec.kind == ModelKind::conv_ae;
  if (!is_ae) throw Error(std::string(who) + ": model is not an autoencoder");
}

void check_margin_args(const Tensor& logits, int label, double kappa) {
  if (logits.numel() < 2) throw Error("logit margin: need at least 2 classes");
  if (label < 0 || label >= logits.numel())
    throw Error("logit margin: label out of range");
  if (kappa < 0.0) throw Error("logit margin: kappa must be >= 0");
}

double best_other_logit(const Tensor& logits, int label) {
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < logits.numel(); ++i)
    if (i != label) best = std::max(best, logits[i]);
  return best;
}

}  // namespace

AttackCriterion sup_untargeted_criterion(const ModelState& m, int label,
                                         double kappa) {
  if (m.spec.kind != ModelKind::classifier)
    throw Error("criterion: model is not a classifier");
  if (label < 0 || label >= m.spec.class_count)
    throw Error("criterion: label out of range");
  if (kappa < 0.0) throw Error("criterion: kappa must be >= 0");
  AttackCriterion c;
  c.kind = CriterionKind::sup_untargeted;
  c.kappa = kappa;
  c.label = label;
  c.model = &m;
  return c;
}

AttackCriterion sup_targeted_criterion(const ModelState& m, int target,
                                       double kappa) {
  AttackCriterion c = sup_untargeted_criterion(m, target, kappa);
  c.kind = CriterionKind::sup_targeted;
  return c;
}

AttackCriterion unsup_recon_criterion(const ModelState& m, const Tensor& x,
                                      double kappa) {
  require_ae(m, "criterion");
  if (kappa < 0.0) throw Error("criterion: kappa must be >= 0");
  AttackCriterion c;
  c.kind = CriterionKind::unsup_recon;
  c.kappa = kappa;
  c.model = &m;
  c.baseline = recon_loss(x, ae_forward(m, x));
  return c;
}

AttackCriterion custom_criterion(CustomLoss fn, double kappa) {
  if (!fn) throw Error("criterion: custom loss is empty");
  AttackCriterion c;
  c.kind = CriterionKind::custom_loss;
  c.kappa = kappa;
  c.custom = std::move(fn);
  return c;
}

double f_sup_untargeted(const Tensor& logits, int label, double kappa) {
  check_margin_args(logits, label, kappa);
  return logits[label] - best_other_logit(logits, label) + kappa;
}

double f_sup_targeted(const Tensor& logits, int target, double kappa) {
  check_margin_args(logits, target, kappa);
  return best_other_logit(logits, target) - logits[target] + kappa;
}

double f_unsup(const Tensor& x, const Tensor& delta, const ModelState& m,
               double kappa) {
  if (x.numel() != delta.numel()) throw Error("f_unsup: shape mismatch");
  Tensor xpd = x;
  for (int i = 0; i < xpd.numel(); ++i) xpd[i] += delta[i];
  double base = recon_loss(x, ae_forward(m, x));
  return recon_loss(x, ae_forward(m, xpd)) - base + kappa;
}

Tape::Var criterion_on_tape(Tape& t, const AttackCriterion& crit,
                            const Tensor& x, Tape::Var xpd) {
  switch (crit.kind) {
    case CriterionKind::sup_untargeted:
    case CriterionKind::sup_targeted: {
      require_model(crit, "criterion");
      if (crit.model->spec.kind != ModelKind::classifier)
        throw Error("criterion: model is not a classifier");
      std::vector<Tape::Var> params = borrow_params_const(t, *crit.model);
      Tape::Var logits =
          model_forward(t, crit.model->spec, params,
                        shaped_for_model(t, crit.model->spec, xpd))
              .out;
      bool targeted = crit.kind == CriterionKind::sup_targeted;
      return t.logit_margin(logits, crit.label, crit.kappa, targeted);
    }
    case CriterionKind::unsup_recon: {
      require_model(crit, "criterion");
      require_ae(*crit.model, "criterion");
      const ModelSpec& spec = crit.model->spec;
      std::vector<Tape::Var> params = borrow_params_const(t, *crit.model);
      Tape::Var out =
          model_forward(t, spec, params, shaped_for_model(t, spec, xpd)).out;
      Tape::Var xc = t.reshape(t.constant(x), batch1_shape(spec));
      Tape::Var dist = t.l2_norm(t.sub(xc, out));
      return t.affine(dist, 1.0, crit.kappa - crit.baseline);
    }
    case CriterionKind::custom_loss:
      if (!crit.custom) throw Error("criterion: custom loss is empty");
      return crit.custom(t, xpd, x);
  }
  throw Error("criterion: unknown kind");
}

double criterion_value(const AttackCriterion& crit, const Tensor& x,
                       const Tensor& delta) {
  if (x.numel() != delta.numel()) throw Error("criterion: shape mismatch");
  Tensor xpd = flat_row(x);
  for (int i = 0; i < xpd.numel(); ++i) xpd[i] += delta[i];
  Tape t;
  Tape::Var f = criterion_on_tape(t, crit, x, t.constant(xpd));
  return t.val(f)[0];
}

Hinge hinge(double f) { return {f > 0.0 ? f : 0.0, f > 0.0}; }

Tensor project_box(const Tensor& delta, const Tensor& x, double eps) {
  if (delta.numel() != x.numel()) throw Error("project_box: shape mismatch");
  Tensor out = delta;
  for (int i = 0; i < out.numel(); ++i) {
    // eps clip composed with the data box; both intervals contain 0, so one
    // clamp to the intersection equals the sequential projection and leaves
    // feasible coordinates bitwise untouched
    double lo = std::max(-eps, -x[i]);
    double hi = std::min(eps, 1.0 - x[i]);
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

double c_update(double c, int t, double beta, double fplus, double cbar) {
  if (t < 1) throw Error("c update: t must be >= 1");
  double next = (1.0 - beta / std::pow(static_cast<double>(t), 0.25)) * c +
                beta * fplus;
  return std::clamp(next, 0.0, cbar);
}

const char* direction_name(MiDirection d) {
  return d == MiDirection::maximize ? "maximize-mi" : "minimize-mi";
}

MiDirection direction_from_name(const std::string& s) {
  if (s == "maximize-mi") return MiDirection::maximize;
  if (s == "minimize-mi") return MiDirection::minimize;
  throw Error("unknown direction: " + s);
}

const char* similarity_name(Similarity s) {
  switch (s) {
    case Similarity::mine: return "mine";
    case Similarity::l2_feature: return "l2-feature";
    case Similarity::cosine_feature: return "cosine-feature";
    case Similarity::recon_l2: return "recon-l2";
  }
  throw Error("unknown similarity");
}

Similarity similarity_from_name(const std::string& s) {
  if (s == "mine") return Similarity::mine;
  if (s == "l2-feature") return Similarity::l2_feature;
  if (s == "cosine-feature") return Similarity::cosine_feature;
  if (s == "recon-l2") return Similarity::recon_l2;
  throw Error("unknown similarity: " + s);
}

double stationarity(const Tensor& delta, double c, const Tensor& grad_delta_f,
                    double grad_c_f, double eps, const Tensor& x, double cbar) {
  if (delta.numel() != grad_delta_f.numel() || delta.numel() != x.numel())
    throw Error("stationarity: shape mismatch");
  Tensor moved = delta;
  for (int i = 0; i < moved.numel(); ++i) moved[i] -= grad_delta_f[i];
  Tensor proj = project_box(moved, x, eps);
  double acc = 0.0;
  for (int i = 0; i < delta.numel(); ++i) {
    double r = delta[i] - proj[i];
    acc += r * r;
  }
  double cr = c - std::clamp(c + grad_c_f, 0.0, cbar);
  return acc + cr * cr;
}

double alt_similarity(const Tensor& fx, const Tensor& fxpd, Similarity kind) {
  if (fx.numel() != fxpd.numel())
    throw Error("alt similarity: length mismatch");
  if (kind == Similarity::l2_feature) {
    double acc = 0.0;
    for (int i = 0; i < fx.numel(); ++i) {
      double d = fx[i] - fxpd[i];
      acc += d * d;
    }
    return std::sqrt(acc);
  }
  if (kind == Similarity::cosine_feature) {
    double na = 0.0, nb = 0.0, dot = 0.0;
    for (int i = 0; i < fx.numel(); ++i) {
      na += fx[i] * fx[i];
      nb += fxpd[i] * fxpd[i];
      dot += fx[i] * fxpd[i];
    }
    if (na == 0.0 || nb == 0.0) return 1.0;
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
  }
  throw Error("alt similarity: kind must be l2-feature or cosine-feature");
}

namespace {

// per-attack working set: the flattened sample, the estimator or cached
// feature reference, and the configuration borrowed from the caller
struct AttackContext {
  const AttackCriterion* crit = nullptr;
  const AttackConfig* cfg = nullptr;
  Tensor x;      // native shape
  Tensor x_row;  // [1, d]
  std::unique_ptr<MiEstimator> est;
  Tensor feat_x;
  double feat_x_norm = 0.0;
  bool conv_feats = false;
};

void validate_config(const AttackConfig& cfg) {
  if (!(cfg.alpha >= 0.0) || !(cfg.beta >= 0.0))
    throw Error("attack: step sizes must be >= 0");
  if (cfg.T < 1) throw Error("attack: T must be >= 1");
  if (!(cfg.eps > 0.0) || cfg.eps > 1.0)
    throw Error("attack: eps must be in (0, 1]");
  if (!(cfg.cbar > 0.0)) throw Error("attack: cbar must be > 0");
  if (cfg.mi.t_inner < 0) throw Error("attack: t_inner must be >= 0");
}

AttackContext make_context(const Tensor& x, const AttackCriterion& crit,
                           const AttackConfig& cfg) {
  validate_config(cfg);
  for (double v : x.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw Error("attack: sample values must lie in [0, 1]");
  AttackContext ctx;
  ctx.crit = &crit;
  ctx.cfg = &cfg;
  ctx.x = x;
  ctx.x_row = flat_row(x);
  switch (cfg.similarity) {
    case Similarity::mine: {
      MiConfig mc = cfg.mi;
      mc.seed = cfg.seed;
      if (mc.scheme == MiScheme::conv) {
        require_model(crit, "attack");
        ctx.est = std::make_unique<MiEstimator>(mc, crit.model);
      } else {
        ctx.est = std::make_unique<MiEstimator>(mc, x.numel());
      }
      ctx.est->ref_features(ctx.x_row);
      break;
    }
    case Similarity::l2_feature:
    case Similarity::cosine_feature: {
      if (crit.model && !crit.model->spec.layers.empty() &&
          crit.model->spec.layers[0].kind == LayerKind::conv2d) {
        ctx.conv_feats = true;
        ctx.feat_x = conv_features(*crit.model, x);
      } else {
        ctx.feat_x = ctx.x_row;
      }
      double s = 0.0;
      for (double v : ctx.feat_x.data) s += v * v;
      ctx.feat_x_norm = std::sqrt(s);
      break;
    }
    case Similarity::recon_l2:
      require_model(crit, "attack");
      require_ae(*crit.model, "attack");
      break;
  }
  return ctx;
}

Tape::Var feature_rows(Tape& t, const AttackContext& ctx, Tape::Var xpd) {
  if (!ctx.conv_feats) return xpd;
  const ModelState& m = *ctx.crit->model;
  std::vector<Tape::Var> params = borrow_params_const(t, m);
  Tape::Var maps =
      forward_layers(t, m.spec, params, shaped_for_model(t, m.spec, xpd), 0, 1);
  const Tensor& v = t.val(maps);  // [1, F, H, W]
  return t.reshape(maps, {v.dim(1), v.dim(2) * v.dim(3)});
}

// the objective-direction similarity node: the quantity the attack maximizes
Tape::Var similarity_node(Tape& t, AttackContext& ctx, Tape::Var xpd) {
  const AttackConfig& cfg = *ctx.cfg;
  switch (cfg.similarity) {
    case Similarity::mine: {
      std::vector<int> perm = ctx.est->draw_perm();
      Tape::Var v = ctx.est->features_on_tape(t, xpd);
      Tape::Var dv =
          ctx.est->dv_on_tape(t, ctx.est->ref_features(ctx.x_row), v, perm);
      return cfg.direction == MiDirection::maximize ? dv
                                                    : t.affine(dv, -1.0, 0.0);
    }
    case Similarity::l2_feature:
      return t.l2_norm(t.sub(feature_rows(t, ctx, xpd), t.constant(ctx.feat_x)));
    case Similarity::cosine_feature: {
      Tape::Var fv = feature_rows(t, ctx, xpd);
      double nv = 0.0;
      for (double v : t.val(fv).data) nv += v * v;
      // a zero vector has no defined angle; distance 1, no gradient
      if (ctx.feat_x_norm == 0.0 || nv == 0.0)
        return t.constant(Tensor::scalar(1.0));
      Tape::Var fc = t.constant(ctx.feat_x);
      Tape::Var num = t.sum(t.mul(fv, fc));
      Tape::Var den = t.mul(t.l2_norm(fv), t.l2_norm(fc));
      return t.affine(t.div(num, den), -1.0, 1.0);
    }
    case Similarity::recon_l2: {
      const ModelSpec& spec = ctx.crit->model->spec;
      std::vector<Tape::Var> params = borrow_params_const(t, *ctx.crit->model);
      Tape::Var out =
          model_forward(t, spec, params, shaped_for_model(t, spec, xpd)).out;
      Tape::Var xc = t.reshape(t.constant(ctx.x), batch1_shape(spec));
      return t.l2_norm(t.sub(xc, out));
    }
  }
  throw Error("attack: unknown similarity");
}

struct StepOutcome {
  Tensor delta_new;
  Tensor grad;        // grad_delta of c f+ - Itilde at (delta_t, c_t)
  double f_at_t = 0.0;
};

StepOutcome gradient_step(AttackContext& ctx, const Tensor& delta_row,
                          double c) {
  const AttackConfig& cfg = *ctx.cfg;
  Tape t;
  Tape::Var dvar = t.input(delta_row);
  Tape::Var xpd = t.add(dvar, t.constant(ctx.x_row));
  Tape::Var f = criterion_on_tape(t, *ctx.crit, ctx.x, xpd);
  Tape::Var sim = similarity_node(t, ctx, xpd);
  Tape::Var obj = t.sub(t.affine(t.relu(f), c, 0.0), sim);
  t.backward(obj);
  StepOutcome s;
  s.f_at_t = t.val(f)[0];
  s.grad = t.grad(dvar);
  Tensor moved = delta_row;
  for (int i = 0; i < moved.numel(); ++i) moved[i] -= cfg.alpha * s.grad[i];
  s.delta_new = project_box(moved, ctx.x_row, cfg.eps);
  return s;
}

// post-step similarity at (x, x + delta_new); for MINE this runs the T_I
// ascent steps first and reports the refreshed estimate
double similarity_value_post(AttackContext& ctx, const Tensor& delta_new) {
  const AttackConfig& cfg = *ctx.cfg;
  Tensor xpd = ctx.x_row;
  for (int i = 0; i < xpd.numel(); ++i) xpd[i] += delta_new[i];
  switch (cfg.similarity) {
    case Similarity::mine:
      return mine_update(*ctx.est, ctx.x_row, xpd, cfg.mi.t_inner);
    case Similarity::l2_feature:
    case Similarity::cosine_feature: {
      Tensor f =
          ctx.conv_feats ? conv_features(*ctx.crit->model, xpd) : xpd;
      return alt_similarity(ctx.feat_x, f, cfg.similarity);
    }
    case Similarity::recon_l2:
      return recon_loss(ctx.x_row, ae_forward(*ctx.crit->model, xpd));
  }
  throw Error("attack: unknown similarity");
}

// maps a raw similarity value to the maximized objective direction
double to_obj(const AttackConfig& cfg, double sim) {
  if (cfg.similarity == Similarity::mine &&
      cfg.direction == MiDirection::minimize)
    return -sim;
  return sim;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

// one attack iteration: gradient step, post-step similarity and criterion,
// best-tracking, trace row
void run_iteration(AttackContext& ctx, AttackResult& res, Tensor& delta,
                   double c, int trace_t) {
  const AttackConfig& cfg = *ctx.cfg;
  StepOutcome s = gradient_step(ctx, delta, c);
  double sim_new = similarity_value_post(ctx, s.delta_new);
  double f_new = criterion_value(*ctx.crit, ctx.x, s.delta_new);
  double stat = stationarity(delta, c, s.grad, hinge(s.f_at_t).fplus, cfg.eps,
                             ctx.x_row, cfg.cbar);
  double obj_new = to_obj(cfg, sim_new);
  if (f_new <= 0.0 && obj_new > res.best_obj) {
    res.best_obj = obj_new;
    res.best_mi = sim_new;
    res.delta_star = s.delta_new;
    res.success = true;
  }
  res.trace.push_back({trace_t, f_new, c, sim_new, stat});
  delta = std::move(s.delta_new);
}

void finish_result(AttackResult& res, const Tensor& x,
                   std::chrono::steady_clock::time_point t0) {
  if (res.success) res.delta_star.shape = x.shape;
  res.wallclock_ms = ms_since(t0);
}

}  // namespace

AttackResult minmax_attack(const Tensor& x, const AttackCriterion& crit,
                           const AttackConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  AttackContext ctx = make_context(x, crit, cfg);
  AttackResult res;
  res.trace.reserve(static_cast<size_t>(cfg.T));
  Tensor delta = Tensor::zeros({1, x.numel()});
  double c = 0.0;
  for (int t = 1; t <= cfg.T; ++t) {
    run_iteration(ctx, res, delta, c, t);
    c = c_update(c, t, cfg.beta, hinge(res.trace.back().f).fplus, cfg.cbar);
  }
  finish_result(res, x, t0);
  return res;
}

AttackResult penalty_attack(const Tensor& x, const AttackCriterion& crit,
                            const AttackConfig& cfg,
                            const PenaltySchedule& sched) {
  auto t0 = std::chrono::steady_clock::now();
  if (sched.B < 1 || sched.T_prime < 1)
    throw Error("penalty attack: B and T' must be >= 1");
  AttackContext ctx = make_context(x, crit, cfg);
  AttackResult res;
  res.trace.reserve(static_cast<size_t>(sched.B) *
                    static_cast<size_t>(sched.T_prime));
  double lb = sched.lb, ub = sched.ub, c = sched.c0;
  int global_t = 0;
  for (int b = 1; b <= sched.B; ++b) {
    // each search step restarts from the unperturbed sample; the estimator
    // stays warm across steps
    Tensor delta = Tensor::zeros({1, x.numel()});
    for (int t = 1; t <= sched.T_prime; ++t)
      run_iteration(ctx, res, delta, c, ++global_t);
    // the running best is successful whenever it exists, so it decides the
    // search branch
    if (res.success) {
      ub = std::min(ub, c);
      if (ub < sched.ub) c = (lb + ub) / 2.0;
    } else {
      lb = std::max(lb, c);
      if (ub < sched.ub)
        c = (lb + ub) / 2.0;
      else
        c *= 10.0;
    }
  }
  finish_result(res, x, t0);
  return res;
}

std::vector<AttackResult> attack_batch(const std::vector<Tensor>& xs,
                                       const CriterionFactory& criterion_for,
                                       const BatchPlan& plan) {
  if (!criterion_for) throw Error("attack batch: criterion factory is empty");
  int n = static_cast<int>(xs.size());
  std::vector<AttackResult> out(static_cast<size_t>(n));
  int workers = std::max(1, plan.n_workers);
  if (n > 0) workers = std::min(workers, n);
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errs(static_cast<size_t>(workers));
  auto run = [&](int w) {
    try {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= n) break;
        AttackConfig cfg = plan.cfg;
        cfg.seed = sub_seed(plan.cfg.seed, "attack:" + std::to_string(i));
        AttackCriterion crit = criterion_for(i, xs[static_cast<size_t>(i)]);
        out[static_cast<size_t>(i)] =
            plan.penalty
                ? penalty_attack(xs[static_cast<size_t>(i)], crit, cfg,
                                 plan.schedule)
                : minmax_attack(xs[static_cast<size_t>(i)], crit, cfg);
      }
    } catch (...) {
      errs[static_cast<size_t>(w)] = std::current_exception();
    }
  };
  if (workers <= 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (std::thread& th : pool) th.join();
  }
  for (std::exception_ptr& e : errs)
    if (e) std::rethrow_exception(e);
  return out;
}

SummaryRow summarize(int sample_id, const AttackResult& r) {
  SummaryRow row;
  row.sample_id = sample_id;
  row.success = r.success;
  row.best_mi = r.best_mi;
  row.iters = static_cast<int>(r.trace.size());
  row.wallclock_ms = r.wallclock_ms;
  return row;
}

void write_trace_csv(const std::string& path,
                     const std::vector<TraceRow>& rows) {
  std::ofstream out = open_text_out(path);
  out << "t,f,c,mi,stationarity_sq\n";
  for (const TraceRow& r : rows)
    out << r.t << ',' << fmt_g17(r.f) << ',' << fmt_g17(r.c) << ','
        << fmt_g17(r.mi) << ',' << fmt_g17(r.stationarity_sq) << '\n';
  close_text_out(out, path);
}

void write_summary_csv(const std::string& path,
                       const std::vector<SummaryRow>& rows) {
  std::ofstream out = open_text_out(path);
  out << "sample_id,success,best_mi,iters,wallclock_ms\n";
  for (const SummaryRow& r : rows)
    out << r.sample_id << ',' << (r.success ? 1 : 0) << ','
        << fmt_g17(r.best_mi) << ',' << r.iters << ','
        << fmt_g17(r.wallclock_ms) << '\n';
  close_text_out(out, path);
}

}  // namespace mmx
