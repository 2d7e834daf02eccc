#include "mmx/augment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <utility>

#include "mmx/rng.hpp"
#include "mmx/textio.hpp"

namespace mmx {

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

void require_nonempty(const Dataset& d, const char* who) {
  if (d.size() == 0) throw Error(std::string(who) + ": empty dataset");
}

// the augmented set keeps the originals first so sample i and its
// augmentation sit at i and i + N
Dataset with_augmented_half(const Dataset& train, std::vector<Tensor> half,
                            const std::string& provenance) {
  Dataset out;
  out.samples = train.samples;
  out.samples.insert(out.samples.end(),
                     std::make_move_iterator(half.begin()),
                     std::make_move_iterator(half.end()));
  if (train.has_labels()) {
    out.labels = train.labels;
    out.labels.insert(out.labels.end(), train.labels.begin(),
                      train.labels.end());
  }
  out.split = train.split;
  out.provenance = provenance;
  out.validate();
  return out;
}

}  // namespace

const char* augment_method_name(AugmentMethod m) {
  switch (m) {
    case AugmentMethod::mine_uae: return "mine-uae";
    case AugmentMethod::l2_uae: return "l2-uae";
    case AugmentMethod::gaussian: return "gaussian";
    case AugmentMethod::flip: return "flip";
    case AugmentMethod::rotation: return "rotation";
    case AugmentMethod::flip_rotation: return "flip-rotation";
  }
  throw Error("unknown augmentation method");
}

AugmentMethod augment_method_from_name(const std::string& s) {
  if (s == "mine-uae") return AugmentMethod::mine_uae;
  if (s == "l2-uae") return AugmentMethod::l2_uae;
  if (s == "gaussian") return AugmentMethod::gaussian;
  if (s == "flip") return AugmentMethod::flip;
  if (s == "rotation") return AugmentMethod::rotation;
  if (s == "flip-rotation") return AugmentMethod::flip_rotation;
  throw Error("unknown augmentation method: " + s);
}

UaeSet generate_uae_set(const Dataset& train, const ModelState& model,
                        const AugmentationPlan& plan) {
  if (plan.method != AugmentMethod::mine_uae &&
      plan.method != AugmentMethod::l2_uae)
    throw Error("uae generation: method must be mine-uae or l2-uae");
  require_nonempty(train, "uae generation");

  const int n = train.size();
  UaeSet out;
  out.records.reserve(static_cast<size_t>(n));
  std::vector<Tensor> half;
  half.reserve(static_cast<size_t>(n));

  if (plan.attack.T == 0) {
    // attack disabled: every sample counts as a failure and replicates
    for (int i = 0; i < n; ++i) {
      half.push_back(train.samples[static_cast<size_t>(i)]);
      SummaryRow row;
      row.sample_id = i;
      out.records.push_back(row);
    }
    out.asr = 0.0;
  } else {
    BatchPlan bp;
    bp.cfg = plan.attack;
    bp.cfg.seed = sub_seed(plan.seed, "uae-attack");
    if (plan.method == AugmentMethod::mine_uae) {
      bp.cfg.similarity = Similarity::mine;
      bp.cfg.direction = MiDirection::minimize;
    } else {
      bp.cfg.similarity = Similarity::recon_l2;
    }
    bp.n_workers = plan.n_workers;

    CriterionFactory factory = [&model](int, const Tensor& x) {
      return unsup_recon_criterion(model, x, 0.0);
    };
    std::vector<AttackResult> results =
        attack_batch(train.samples, factory, bp);

    int successes = 0;
    for (int i = 0; i < n; ++i) {
      const AttackResult& r = results[static_cast<size_t>(i)];
      const Tensor& x = train.samples[static_cast<size_t>(i)];
      if (r.success) {
        ++successes;
        Tensor adv = x;
        for (int k = 0; k < adv.numel(); ++k) adv[k] += r.delta_star[k];
        half.push_back(std::move(adv));
      } else {
        half.push_back(x);
      }
      out.records.push_back(summarize(i, r));
    }
    out.asr = static_cast<double>(successes) / static_cast<double>(n);
  }

  out.augmented = with_augmented_half(
      train, std::move(half),
      std::string("augment:") + augment_method_name(plan.method));
  return out;
}

Dataset gaussian_augment(const Dataset& train, double sigma, uint64_t seed) {
  if (!(sigma >= 0.0)) throw Error("gaussian augment: sigma must be >= 0");
  require_nonempty(train, "gaussian augment");
  std::vector<Tensor> half;
  half.reserve(static_cast<size_t>(train.size()));
  for (int i = 0; i < train.size(); ++i) {
    Rng rng(sub_seed(seed, "noise:" + std::to_string(i)));
    Tensor s = train.samples[static_cast<size_t>(i)];
    for (int k = 0; k < s.numel(); ++k)
      s[k] = std::clamp(s[k] + rng.normal(0.0, sigma), 0.0, 1.0);
    half.push_back(std::move(s));
  }
  return with_augmented_half(train, std::move(half), "augment:gaussian");
}

Tensor hflip_image(const Tensor& x) {
  if (x.ndim() != 2 && x.ndim() != 3)
    throw Error("flip: image-shaped sample required");
  Tensor out = x;
  int c = x.ndim() == 3 ? x.dim(0) : 1;
  int h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col)
        out[(ch * h + r) * w + col] = x[(ch * h + r) * w + (w - 1 - col)];
  return out;
}

Tensor vflip_image(const Tensor& x) {
  if (x.ndim() != 2 && x.ndim() != 3)
    throw Error("flip: image-shaped sample required");
  Tensor out = x;
  int c = x.ndim() == 3 ? x.dim(0) : 1;
  int h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col)
        out[(ch * h + r) * w + col] = x[(ch * h + (h - 1 - r)) * w + col];
  return out;
}

Tensor rotate_image(const Tensor& x, double deg) {
  if (x.ndim() != 2 && x.ndim() != 3)
    throw Error("rotate: image-shaped sample required");
  int c = x.ndim() == 3 ? x.dim(0) : 1;
  int h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
  double th = deg * 3.14159265358979323846 / 180.0;
  double ct = std::cos(th), st = std::sin(th);
  double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor out = Tensor::zeros(x.shape);
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      double dr = r - cy, dc = col - cx;
      double sr = cy + ct * dr - st * dc;
      double sc = cx + st * dr + ct * dc;
      long ir = std::lround(sr), ic = std::lround(sc);
      if (ir < 0 || ir >= h || ic < 0 || ic >= w) continue;
      for (int ch = 0; ch < c; ++ch)
        out[(ch * h + r) * w + col] =
            x[(ch * h + static_cast<int>(ir)) * w + static_cast<int>(ic)];
    }
  }
  return out;
}

Dataset geometric_augment(const Dataset& train, const GeometricOptions& opt,
                          uint64_t seed) {
  require_nonempty(train, "geometric augment");
  if (train.samples[0].ndim() != 2 && train.samples[0].ndim() != 3)
    throw Error("geometric augment: image-shaped data required");
  std::vector<int> enabled;  // 0 hflip, 1 vflip, 2 rotation
  if (opt.hflip) enabled.push_back(0);
  if (opt.vflip) enabled.push_back(1);
  if (opt.rotation_deg != 0.0) enabled.push_back(2);
  if (enabled.empty()) throw Error("geometric augment: no transforms enabled");

  std::vector<Tensor> half;
  half.reserve(static_cast<size_t>(train.size()));
  for (int i = 0; i < train.size(); ++i) {
    Rng rng(sub_seed(seed, "geo:" + std::to_string(i)));
    int pick = enabled[static_cast<size_t>(
        rng.below(static_cast<uint64_t>(enabled.size())))];
    const Tensor& s = train.samples[static_cast<size_t>(i)];
    switch (pick) {
      case 0: half.push_back(hflip_image(s)); break;
      case 1: half.push_back(vflip_image(s)); break;
      default: half.push_back(rotate_image(s, opt.rotation_deg)); break;
    }
  }
  return with_augmented_half(train, std::move(half), "augment:geometric");
}

double asr(const std::vector<double>& orig_losses,
           const std::vector<double>& adv_losses, double kappa) {
  if (orig_losses.size() != adv_losses.size())
    throw Error("asr: length mismatch");
  if (orig_losses.empty()) throw Error("asr: empty inputs");
  int hits = 0;
  for (size_t i = 0; i < orig_losses.size(); ++i)
    if (adv_losses[i] <= orig_losses[i] - kappa) ++hits;
  return static_cast<double>(hits) / static_cast<double>(orig_losses.size());
}

RetrainResult retrain_and_eval(const ModelState& original, const Dataset& train,
                               const Dataset& augmented, const Dataset& test,
                               const TrainConfig& cfg, double epoch_ratio,
                               uint64_t seed) {
  if (original.spec.kind == ModelKind::classifier ||
      original.spec.kind == ModelKind::mine_statistics)
    throw Error("retrain: autoencoder required");
  if (!(epoch_ratio > 0.0)) throw Error("retrain: epoch ratio must be > 0");
  require_nonempty(augmented, "retrain");
  require_nonempty(test, "retrain");

  TrainConfig rcfg = cfg;
  rcfg.epochs = std::max(
      1, static_cast<int>(std::llround(cfg.epochs * epoch_ratio)));
  rcfg.seed = sub_seed(seed, "augment-retrain");
  // from-scratch retraining must not share the original initialization
  if (rcfg.seed == original.seed) ++rcfg.seed;

  RetrainResult out;
  auto t0 = std::chrono::steady_clock::now();
  out.model = train_model(original.spec, augmented, rcfg);
  out.report.retrain_ms = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  out.report.orig_train_loss = model_objective(original, train);
  out.report.retrain_train_loss = model_objective(out.model, train);
  out.report.orig_test_err = dataset_mse(original, test);
  out.report.retrain_test_err = dataset_mse(out.model, test);
  out.report.eval_ms = ms_since(t0);

  out.report.improvement_pct =
      (out.report.orig_test_err - out.report.retrain_test_err) /
      out.report.orig_test_err * 100.0;
  out.report.seed = seed;
  out.report.retrain_seed = rcfg.seed;
  return out;
}

AugmentationRun run_augmentation(const Dataset& train, const Dataset& test,
                                 const ModelState& model,
                                 const AugmentationPlan& plan) {
  AugmentationRun run;
  double asr_value = std::numeric_limits<double>::quiet_NaN();

  auto t0 = std::chrono::steady_clock::now();
  switch (plan.method) {
    case AugmentMethod::mine_uae:
    case AugmentMethod::l2_uae: {
      UaeSet us = generate_uae_set(train, model, plan);
      run.augmented = std::move(us.augmented);
      run.records = std::move(us.records);
      asr_value = us.asr;
      break;
    }
    case AugmentMethod::gaussian:
      run.augmented = gaussian_augment(train, plan.sigma,
                                       sub_seed(plan.seed, "augment-noise"));
      break;
    case AugmentMethod::flip:
    case AugmentMethod::rotation:
    case AugmentMethod::flip_rotation: {
      GeometricOptions opt;
      opt.hflip = plan.method != AugmentMethod::rotation;
      opt.vflip = plan.method != AugmentMethod::rotation;
      opt.rotation_deg =
          plan.method == AugmentMethod::flip ? 0.0 : plan.rotation_deg;
      run.augmented =
          geometric_augment(train, opt, sub_seed(plan.seed, "augment-geo"));
      break;
    }
  }
  double gen_ms = ms_since(t0);

  RetrainResult rr =
      retrain_and_eval(model, train, run.augmented, test, plan.retrain,
                       plan.retrain_epoch_ratio, plan.seed);
  run.retrained = std::move(rr.model);
  run.report = rr.report;
  run.report.method = augment_method_name(plan.method);
  run.report.asr = asr_value;
  run.report.gen_ms = gen_ms;
  return run;
}

void write_report(const std::string& path, const AugmentationReport& r) {
  std::ofstream out = open_text_out(path);
  out << "method=" << r.method << '\n'
      << "asr=" << fmt_g17(r.asr) << '\n'
      << "orig_train_loss=" << fmt_g17(r.orig_train_loss) << '\n'
      << "retrain_train_loss=" << fmt_g17(r.retrain_train_loss) << '\n'
      << "orig_test_err=" << fmt_g17(r.orig_test_err) << '\n'
      << "retrain_test_err=" << fmt_g17(r.retrain_test_err) << '\n'
      << "improvement_pct=" << fmt_g17(r.improvement_pct) << '\n'
      << "gen_ms=" << fmt_g17(r.gen_ms) << '\n'
      << "retrain_ms=" << fmt_g17(r.retrain_ms) << '\n'
      << "eval_ms=" << fmt_g17(r.eval_ms) << '\n'
      << "seed=" << r.seed << '\n'
      << "retrain_seed=" << r.retrain_seed << '\n';
  close_text_out(out, path);
}

void append_report_csv(const std::string& path, const AugmentationReport& r) {
  bool need_header = true;
  {
    std::ifstream probe(path, std::ios::binary);
    if (probe.good() && probe.peek() != std::ifstream::traits_type::eof())
      need_header = false;
  }
  std::ofstream out = open_text_out(path, true);
  if (need_header)
    out << "method,asr,orig_train_loss,retrain_train_loss,orig_test_err,"
           "retrain_test_err,improvement_pct,gen_ms,retrain_ms,eval_ms,seed,"
           "retrain_seed\n";
  out << r.method << ',' << fmt_g17(r.asr) << ',' << fmt_g17(r.orig_train_loss)
      << ',' << fmt_g17(r.retrain_train_loss) << ',' << fmt_g17(r.orig_test_err)
      << ',' << fmt_g17(r.retrain_test_err) << ','
      << fmt_g17(r.improvement_pct) << ',' << fmt_g17(r.gen_ms) << ','
      << fmt_g17(r.retrain_ms) << ',' << fmt_g17(r.eval_ms) << ',' << r.seed
      << ',' << r.retrain_seed << '\n';
  close_text_out(out, path);
}

}  // namespace mmx
