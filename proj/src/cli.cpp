#include "mmx/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "mmx/attack.hpp"
#include "mmx/augment.hpp"
#include "mmx/checkpoint.hpp"
#include "mmx/data_io.hpp"
#include "mmx/mine.hpp"
#include "mmx/rng.hpp"
#include "mmx/tensor.hpp"
#include "mmx/textio.hpp"

namespace mmx {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct RunPaths {
  std::string id;
  std::string dir;
};

// resolves the id into cfg and persists the resolved config before any work
RunPaths open_run(const std::string& command, RunConfig& cfg,
                  bool with_traces) {
  RunPaths p;
  p.id = derive_run_id(command, cfg);
  cfg.run.id = p.id;
  p.dir = cfg.run.out + "/" + p.id;
  fs::create_directories(p.dir);
  if (with_traces) fs::create_directories(p.dir + "/traces");
  write_config(p.dir + "/resolved-config", cfg);
  return p;
}

void write_kv_report(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& rows) {
  std::ofstream out = open_text_out(path);
  for (const auto& [k, v] : rows) out << k << "=" << v << "\n";
  close_text_out(out, path);
}

void append_ledger(const std::string& path, const std::string& header,
                   const std::string& row) {
  bool need_header = true;
  {
    std::ifstream probe(path, std::ios::binary);
    if (probe.good() && probe.peek() != std::ifstream::traits_type::eof())
      need_header = false;
  }
  std::ofstream out = open_text_out(path, true);
  if (need_header) out << header << "\n";
  out << row << "\n";
  close_text_out(out, path);
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string run_train(const RunConfig& cfg_in, std::ostream& log) {
  RunConfig cfg = cfg_in;
  Clock::time_point t0 = Clock::now();
  SplitData data = build_datasets(cfg);
  RunPaths p = open_run("train", cfg, false);
  ModelState model = obtain_model(cfg, data.train);
  save_checkpoint(p.dir + "/model.ckpt", model);
  double train_obj = model_objective(model, data.train);
  double test_mse = data.test.size() > 0
                        ? dataset_mse(model, data.test)
                        : std::numeric_limits<double>::quiet_NaN();
  write_kv_report(p.dir + "/report.txt",
                  {{"command", "train"},
                   {"run", p.id},
                   {"kind", cfg.model.kind},
                   {"train_samples", std::to_string(data.train.size())},
                   {"test_samples", std::to_string(data.test.size())},
                   {"epochs_run", std::to_string(model.epochs_run)},
                   {"final_loss", fmt_g17(model.final_loss)},
                   {"train_objective", fmt_g17(train_obj)},
                   {"test_mse", fmt_g17(test_mse)},
                   {"wallclock_ms", fmt_g17(ms_since(t0))}});
  log << "train " << p.id << ": objective " << train_obj << ", test mse "
      << test_mse << "\n";
  log << "wrote " << p.dir << "\n";
  return p.dir;
}

std::string run_attack(const RunConfig& cfg_in, std::ostream& log) {
  RunConfig cfg = cfg_in;
  Clock::time_point t0 = Clock::now();
  SplitData data = build_datasets(cfg);
  const Dataset& split = data.train;
  RunPaths p = open_run("attack", cfg, true);
  ModelState model = obtain_model(cfg, data.train);
  save_checkpoint(p.dir + "/model.ckpt", model);

  std::vector<int> picked;
  if (cfg.attack.sample >= 0) {
    if (cfg.attack.sample >= split.size())
      throw Error("attack: sample index out of range");
    picked.push_back(cfg.attack.sample);
  } else {
    int n = split.size();
    if (cfg.attack.count > 0) n = std::min(n, cfg.attack.count);
    for (int i = 0; i < n; ++i) picked.push_back(i);
  }
  std::vector<Tensor> xs;
  xs.reserve(picked.size());
  for (int idx : picked) xs.push_back(split.samples[static_cast<size_t>(idx)]);

  const std::string& ckind = cfg.attack.criterion;
  if ((ckind == "sup-untargeted") && !split.has_labels())
    throw Error("attack: sup-untargeted needs a labeled split");
  CriterionFactory factory;
  if (ckind == "unsup-recon") {
    factory = [&model, &cfg](int, const Tensor& x) {
      return unsup_recon_criterion(model, x, cfg.attack.kappa);
    };
  } else if (ckind == "sup-untargeted") {
    factory = [&model, &cfg, &split, &picked](int i, const Tensor&) {
      int label = split.labels[static_cast<size_t>(picked[static_cast<size_t>(i)])];
      return sup_untargeted_criterion(model, label, cfg.attack.kappa);
    };
  } else if (ckind == "sup-targeted") {
    factory = [&model, &cfg](int, const Tensor&) {
      return sup_targeted_criterion(model, cfg.attack.label, cfg.attack.kappa);
    };
  } else {
    throw Error("attack: unknown criterion '" + ckind + "'");
  }

  BatchPlan plan;
  plan.cfg = attack_config_from(cfg);
  plan.penalty = cfg.attack.mode == "penalty";
  if (!plan.penalty && cfg.attack.mode != "minmax")
    throw Error("attack: unknown mode '" + cfg.attack.mode + "'");
  plan.schedule = penalty_schedule_from(cfg);
  plan.n_workers = cfg.attack.workers;

  std::vector<AttackResult> results = attack_batch(xs, factory, plan);

  std::vector<SummaryRow> rows;
  int successes = 0;
  double mi_sum = 0.0;
  std::vector<double> iter_counts;
  for (size_t i = 0; i < results.size(); ++i) {
    const AttackResult& r = results[i];
    write_trace_csv(p.dir + "/traces/trace_" + std::to_string(picked[i]) +
                        ".csv",
                    r.trace);
    rows.push_back(summarize(picked[i], r));
    if (r.success) {
      ++successes;
      mi_sum += r.best_mi;
    }
    iter_counts.push_back(static_cast<double>(r.trace.size()));
  }
  write_summary_csv(p.dir + "/summary.csv", rows);

  double asr_v = rows.empty() ? 0.0
                              : static_cast<double>(successes) /
                                    static_cast<double>(rows.size());
  double mean_best_mi = successes > 0
                            ? mi_sum / successes
                            : std::numeric_limits<double>::quiet_NaN();
  double med_iters = median_of(iter_counts);
  double total_ms = ms_since(t0);

  write_kv_report(p.dir + "/report.txt",
                  {{"command", "attack"},
                   {"run", p.id},
                   {"mode", cfg.attack.mode},
                   {"criterion", ckind},
                   {"similarity", cfg.attack.similarity},
                   {"split", "train"},
                   {"samples", std::to_string(rows.size())},
                   {"successes", std::to_string(successes)},
                   {"asr", fmt_g17(asr_v)},
                   {"mean_best_mi", fmt_g17(mean_best_mi)},
                   {"median_iters", fmt_g17(med_iters)},
                   {"total_ms", fmt_g17(total_ms)}});
  append_ledger(
      cfg.run.out + "/attack-ledger.csv",
      "run,mode,criterion,similarity,samples,asr,mean_best_mi,median_iters,"
      "total_ms",
      p.id + "," + cfg.attack.mode + "," + ckind + "," +
          cfg.attack.similarity + "," + std::to_string(rows.size()) + "," +
          fmt_g17(asr_v) + "," + fmt_g17(mean_best_mi) + "," +
          fmt_g17(med_iters) + "," + fmt_g17(total_ms));
  log << "attack " << p.id << ": " << successes << "/" << rows.size()
      << " succeeded, asr " << asr_v << "\n";
  log << "wrote " << p.dir << "\n";
  return p.dir;
}

std::string run_augment(const RunConfig& cfg_in, std::ostream& log) {
  RunConfig cfg = cfg_in;
  SplitData data = build_datasets(cfg);
  if (data.test.size() == 0)
    throw Error("augment: a test split is required for evaluation");
  RunPaths p = open_run("augment", cfg, false);
  ModelState model = obtain_model(cfg, data.train);
  save_checkpoint(p.dir + "/model.ckpt", model);
  AugmentationPlan plan = augmentation_plan_from(cfg);
  AugmentationRun run = run_augmentation(data.train, data.test, model, plan);
  save_checkpoint(p.dir + "/retrained.ckpt", run.retrained);
  if (!run.records.empty())
    write_summary_csv(p.dir + "/summary.csv", run.records);
  write_report(p.dir + "/report.txt", run.report);
  const AugmentationReport& r = run.report;
  append_ledger(
      cfg.run.out + "/augment-ledger.csv",
      "run,method,asr,orig_train_loss,retrain_train_loss,orig_test_err,"
      "retrain_test_err,improvement_pct,gen_ms,retrain_ms,eval_ms,seed,"
      "retrain_seed",
      p.id + "," + r.method + "," + fmt_g17(r.asr) + "," +
          fmt_g17(r.orig_train_loss) + "," + fmt_g17(r.retrain_train_loss) +
          "," + fmt_g17(r.orig_test_err) + "," + fmt_g17(r.retrain_test_err) +
          "," + fmt_g17(r.improvement_pct) + "," + fmt_g17(r.gen_ms) + "," +
          fmt_g17(r.retrain_ms) + "," + fmt_g17(r.eval_ms) + "," +
          std::to_string(r.seed) + "," + std::to_string(r.retrain_seed));
  log << "augment " << p.id << ": " << r.method << " test err "
      << r.orig_test_err << " -> " << r.retrain_test_err << " ("
      << r.improvement_pct << "%)\n";
  log << "wrote " << p.dir << "\n";
  return p.dir;
}

CalibrationOutcome run_mine_calibrate(const RunConfig& cfg_in,
                                      std::ostream& log) {
  RunConfig cfg = cfg_in;
  Clock::time_point t0 = Clock::now();
  const CalibrateSection& cal = cfg.calibrate;
  if (cal.dim < 1 || cal.n < 1 || cal.steps < 0 || cal.batch_K < 1 ||
      cal.reps < 1)
    throw Error("calibrate: dim, n, batch_K, reps must be positive");
  RunPaths p = open_run("mine-calibrate", cfg, false);

  PairedDataset pd = synth_gaussian_pairs(
      cal.rho, cal.dim, cal.n, sub_seed(cfg.run.seed, "calibrate-data"));
  ModelState net = make_model(statistics_net_spec(cal.dim, cfg.mine.hidden),
                              sub_seed(cfg.run.seed, "calibrate-net"));
  OptimizerState opt = make_optimizer(OptKind::adam, cal.lr);
  Rng rng(sub_seed(cfg.run.seed, "calibrate-shuffle"));

  const int dim = cal.dim, n = cal.n, K = std::min(cal.batch_K, cal.n);
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
  for (int step = 0; step < cal.steps; ++step) {
    auto [u, v] = batch_of(K, false);
    dv_train_step(net, opt, u, v, rng.permutation(K));
  }
  auto [ue, ve] = batch_of(n, true);
  double acc = 0.0;
  for (int r = 0; r < cal.reps; ++r)
    acc += dv_objective(net, make_pair_batch(ue, ve, rng.permutation(n)));

  CalibrationOutcome res;
  res.dir = p.dir;
  res.analytic_mi = pd.analytic_mi;
  res.estimate = acc / cal.reps;
  res.rel_err = std::fabs(res.estimate - res.analytic_mi) /
                std::fabs(res.analytic_mi);
  res.within = cal.tolerance <= 0.0 || res.rel_err <= cal.tolerance;
  write_kv_report(p.dir + "/report.txt",
                  {{"command", "mine-calibrate"},
                   {"run", p.id},
                   {"rho", fmt_g17(cal.rho)},
                   {"dim", std::to_string(cal.dim)},
                   {"n", std::to_string(cal.n)},
                   {"steps", std::to_string(cal.steps)},
                   {"analytic_mi", fmt_g17(res.analytic_mi)},
                   {"estimate", fmt_g17(res.estimate)},
                   {"rel_err", fmt_g17(res.rel_err)},
                   {"tolerance", fmt_g17(cal.tolerance)},
                   {"within_tolerance", res.within ? "true" : "false"},
                   {"wallclock_ms", fmt_g17(ms_since(t0))}});
  log << "mine-calibrate " << p.id << ": estimate " << res.estimate
      << " vs analytic " << res.analytic_mi << " (rel err " << res.rel_err
      << ")\n";
  log << "wrote " << p.dir << "\n";
  return res;
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path, std::ios::binary);
  if (!in) return rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

void render_table(std::ostream& out, const std::string& title,
                  const std::vector<std::vector<std::string>>& rows) {
  out << title << "\n";
  if (rows.empty()) {
    out << "  (no runs)\n";
    return;
  }
  std::vector<size_t> width;
  for (const auto& row : rows)
    for (size_t i = 0; i < row.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], row[i].size());
    }
  for (const auto& row : rows) {
    out << " ";
    for (size_t i = 0; i < row.size(); ++i) {
      out << " " << row[i];
      if (i + 1 < row.size())
        out << std::string(width[i] - row[i].size(), ' ');
    }
    out << "\n";
  }
}

}  // namespace

void run_report(const std::string& out_root, std::ostream& out) {
  std::ostringstream buf;
  render_table(buf, "attack runs",
               read_csv_rows(out_root + "/attack-ledger.csv"));
  buf << "\n";
  render_table(buf, "augmentation runs",
               read_csv_rows(out_root + "/augment-ledger.csv"));
  out << buf.str();
  fs::create_directories(out_root);
  std::string path = out_root + "/report.txt";
  std::ofstream f = open_text_out(path);
  f << buf.str();
  close_text_out(f, path);
}

int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err) {
  CLI::App app{"mutual-information guided adversarial example toolkit"};
  app.name("mmx");
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed_override = 0;
  std::string out_override, id_override;
  int sample_override = -1, count_override = 0, workers_override = 0;
  std::string report_root = "out";

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config file")->required();
    sub->add_option("--seed", seed_override, "override [run] seed");
    sub->add_option("--out", out_override, "override [run] out");
    sub->add_option("--id", id_override, "override [run] id");
  };
  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train);
  CLI::App* attack =
      app.add_subcommand("attack", "run the configured attack over a split");
  add_common(attack);
  attack->add_option("--sample", sample_override,
                     "attack a single sample index");
  attack->add_option("--count", count_override,
                     "attack only the first N samples");
  attack->add_option("--workers", workers_override, "worker thread count");
  CLI::App* augment =
      app.add_subcommand("augment", "augment, retrain, and evaluate");
  add_common(augment);
  augment->add_option("--workers", workers_override, "worker thread count");
  CLI::App* calibrate = app.add_subcommand(
      "mine-calibrate", "check the estimator against an analytic target");
  add_common(calibrate);
  CLI::App* report =
      app.add_subcommand("report", "render the run ledgers as tables");
  report->add_option("--out", report_root, "ledger directory root");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (report->parsed()) {
      run_report(report_root, out);
      return 0;
    }
    RunConfig cfg = parse_config_file(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) cfg.run.seed = seed_override;
    if (sub->count("--out")) cfg.run.out = out_override;
    if (sub->count("--id")) cfg.run.id = id_override;
    if (train->parsed()) {
      run_train(cfg, out);
      return 0;
    }
    if (attack->parsed()) {
      if (attack->count("--sample")) cfg.attack.sample = sample_override;
      if (attack->count("--count")) cfg.attack.count = count_override;
      if (attack->count("--workers")) cfg.attack.workers = workers_override;
      run_attack(cfg, out);
      return 0;
    }
    if (augment->parsed()) {
      if (augment->count("--workers")) cfg.attack.workers = workers_override;
      run_augment(cfg, out);
      return 0;
    }
    if (calibrate->parsed()) {
      CalibrationOutcome res = run_mine_calibrate(cfg, out);
      if (!res.within) {
        err << "error: calibration outside tolerance (rel err "
            << res.rel_err << ")\n";
        return 1;
      }
      return 0;
    }
    err << "error: no command\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mmx
