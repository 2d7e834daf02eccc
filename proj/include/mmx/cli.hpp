#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "mmx/config.hpp"

namespace mmx {

// Every command materializes its outputs under <run.out>/<run-id>/ with the
// resolved config persisted first, so any run directory reproduces itself:
//   resolved-config   every field echoed, overrides applied
//   report.txt        flat key=value summary
//   summary.csv       per-sample rows (attack, adversarial augmentation)
//   traces/           per-sample iteration traces (attack)
//   *.ckpt            model parameters
// Cross-run ledgers attack-ledger.csv and augment-ledger.csv accumulate at
// the <run.out> root, keyed by run id.

std::string run_train(const RunConfig& cfg, std::ostream& log);
std::string run_attack(const RunConfig& cfg, std::ostream& log);
std::string run_augment(const RunConfig& cfg, std::ostream& log);

struct CalibrationOutcome {
  std::string dir;
  double analytic_mi = 0.0;
  double estimate = 0.0;
  double rel_err = 0.0;
  bool within = true;  // tolerance gate; true when the gate is disabled
};
CalibrationOutcome run_mine_calibrate(const RunConfig& cfg, std::ostream& log);

// renders the ledgers under out_root as aligned tables, to the stream and to
// <out_root>/report.txt
void run_report(const std::string& out_root, std::ostream& out);

// full argv-style entry point (without the program name); returns the
// process exit code and writes diagnostics to err
int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err);

}  // namespace mmx
