#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmx/cli.hpp"
#include "mmx/config.hpp"
#include "mmx/data_io.hpp"
#include "mmx/tensor.hpp"

using namespace mmx;
namespace fs = std::filesystem;

namespace {

// fresh scratch directory per test, removed on destruction
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("mmx-cli-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string s(const std::string& rel) const { return (path / rel).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  int rc = run_command(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

// tiny end-to-end config; synthetic data, small model, short attack
std::string small_config(uint64_t seed, const std::string& out_dir) {
  std::ostringstream ss;
  ss << "[run]\nseed = " << seed << "\nout = " << out_dir << "\n"
     << "[data]\nsource = synth-digits\ntrain_count = 16\ntest_count = 8\n"
     << "[model]\nkind = dense-ae\nlatent = 8\nepochs = 2\nbatch = 8\n"
     << "[attack]\nT = 4\neps = 0.3\ncount = 2\n"
     << "[mine]\nK = 8\ndprime = 4\nhidden = 16\nt_inner = 1\n";
  return ss.str();
}

// summary.csv comparison with the wallclock_ms column masked
std::string mask_wallclock(const std::string& csv) {
  std::vector<std::string> rows = lines_of(csv);
  REQUIRE(!rows.empty());
  std::istringstream hs(rows[0]);
  std::vector<std::string> header;
  std::string cell;
  while (std::getline(hs, cell, ',')) header.push_back(cell);
  int wcol = -1;
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == "wallclock_ms") wcol = static_cast<int>(i);
  REQUIRE(wcol >= 0);
  std::string out = rows[0] + "\n";
  for (size_t r = 1; r < rows.size(); ++r) {
    std::istringstream rs(rows[r]);
    std::vector<std::string> cells;
    while (std::getline(rs, cell, ',')) cells.push_back(cell);
    cells[static_cast<size_t>(wcol)] = "X";
    for (size_t i = 0; i < cells.size(); ++i)
      out += (i ? "," : "") + cells[i];
    out += "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("config serialization echoes every field and round-trips") {
  RunConfig cfg;
  std::string text = serialize_config(cfg);
  for (const char* section :
       {"[run]", "[data]", "[model]", "[attack]", "[mine]", "[augment]",
        "[calibrate]"})
    CHECK(text.find(section) != std::string::npos);
  CHECK(text.find("seed = 0\n") != std::string::npos);
  CHECK(text.find("source = synth-digits\n") != std::string::npos);
  CHECK(text.find("latent = 128\n") != std::string::npos);
  CHECK(text.find("K = 500\n") != std::string::npos);
  CHECK(text.find("hidden = 100,100\n") != std::string::npos);
  CHECK(text.find("csv_header = false\n") != std::string::npos);

  RunConfig back = parse_config(text);
  CHECK(serialize_config(back) == text);

  cfg.run.seed = 123456789012345ull;
  cfg.model.lr = 0.1 + 0.2;
  cfg.attack.eps = 1e-17;
  cfg.mine.hidden = {7};
  cfg.data.train = "path/with spaces.idx";
  std::string text2 = serialize_config(cfg);
  RunConfig back2 = parse_config(text2);
  CHECK(serialize_config(back2) == text2);
  CHECK(back2.run.seed == cfg.run.seed);
  CHECK(back2.model.lr == cfg.model.lr);
  CHECK(back2.attack.eps == cfg.attack.eps);
  CHECK(back2.data.train == cfg.data.train);
}

TEST_CASE("config parsing rejects unknown names and malformed lines") {
  CHECK_THROWS_WITH_AS(parse_config("[run]\nbogus = 1\n"),
                       doctest::Contains("unknown key 'bogus'"), Error);
  CHECK_THROWS_WITH_AS(parse_config("[nope]\n"),
                       doctest::Contains("unknown section"), Error);
  CHECK_THROWS_WITH_AS(parse_config("seed = 1\n"),
                       doctest::Contains("outside any section"), Error);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nseed\n"),
                       doctest::Contains("expected key = value"), Error);
  CHECK_THROWS_WITH_AS(parse_config("[run]\nseed = -3\n"),
                       doctest::Contains("bad unsigned"), Error);
  CHECK_THROWS_WITH_AS(parse_config("[model]\nepochs = ten\n"),
                       doctest::Contains("bad integer"), Error);
  CHECK_THROWS_WITH_AS(parse_config("[data]\ncsv_header = yes\n"),
                       doctest::Contains("bad bool"), Error);
  CHECK_THROWS_WITH_AS(parse_config("[model]\nlr = fast\n"),
                       doctest::Contains("bad number"), Error);
}

TEST_CASE("config parsing accepts comments, blanks, and later overrides") {
  RunConfig cfg = parse_config(
      "# leading comment\n"
      "[run]\n"
      "; alt comment style\n"
      "seed = 4\n"
      "\n"
      "  seed = 9  \n"
      "[mine]\n"
      "hidden = 10, 20 ,30\n");
  CHECK(cfg.run.seed == 9);
  CHECK(cfg.mine.hidden == std::vector<int>{10, 20, 30});
}

TEST_CASE("run ids derive deterministically from command and config") {
  RunConfig a, b;
  CHECK(derive_run_id("attack", a) == derive_run_id("attack", b));
  CHECK(derive_run_id("attack", a) != derive_run_id("train", a));
  b.run.seed = 1;
  CHECK(derive_run_id("attack", a) != derive_run_id("attack", b));
  b.run.id = "pinned";
  CHECK(derive_run_id("attack", b) == "pinned");
  std::string id = derive_run_id("attack", a);
  CHECK(id.rfind("attack-", 0) == 0);
  CHECK(id.size() == 7 + 16);
}

TEST_CASE("synthetic datasets build from the config with named streams") {
  RunConfig cfg;
  cfg.run.seed = 11;
  cfg.data.train_count = 6;
  cfg.data.test_count = 3;
  SplitData d1 = build_datasets(cfg);
  CHECK(d1.train.size() == 6);
  CHECK(d1.test.size() == 3);
  CHECK(d1.train.split == "train");
  CHECK(d1.test.split == "test");
  CHECK(d1.train.samples[0].shape == std::vector<int>{1, 28, 28});
  SplitData d2 = build_datasets(cfg);
  for (int i = 0; i < 6; ++i)
    CHECK(d1.train.samples[static_cast<size_t>(i)].data ==
          d2.train.samples[static_cast<size_t>(i)].data);
  cfg.run.seed = 12;
  SplitData d3 = build_datasets(cfg);
  CHECK(d1.train.samples[0].data != d3.train.samples[0].data);
}

TEST_CASE("csv datasets are normalized by train statistics and truncated") {
  TempDir tmp("csv");
  write_file(tmp.s("train.csv"), "0,0\n2,10\n4,10\n4,10\n");
  write_file(tmp.s("test.csv"), "1,5\n8,20\n");
  RunConfig cfg;
  cfg.data.source = "csv";
  cfg.data.train = tmp.s("train.csv");
  cfg.data.test = tmp.s("test.csv");
  cfg.data.train_count = 3;  // drops the last train row
  cfg.data.test_count = 0;   // keeps everything
  SplitData d = build_datasets(cfg);
  CHECK(d.train.size() == 3);
  CHECK(d.test.size() == 2);
  // train column ranges [0,4] and [0,10] map the test row (1,5) accordingly
  CHECK(d.test.samples[0][0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(d.test.samples[0][1] == doctest::Approx(0.5).epsilon(1e-12));
  // out-of-range test values clamp into the unit box
  CHECK(d.test.samples[1][0] == 1.0);
  CHECK(d.test.samples[1][1] == 1.0);

  // disabling normalization only suits data already inside the unit box
  cfg.data.csv_normalize = false;
  CHECK_THROWS_WITH_AS(build_datasets(cfg),
                       doctest::Contains("outside [0,1]"), Error);
  write_file(tmp.s("scaled.csv"), "0.5,0.25\n0,1\n");
  cfg.data.train = tmp.s("scaled.csv");
  cfg.data.test = "";
  SplitData raw = build_datasets(cfg);
  CHECK(raw.train.samples[0][0] == 0.5);
  CHECK(raw.train.samples[0][1] == 0.25);
}

TEST_CASE("model specs resolve against the sample shape") {
  RunConfig cfg;
  cfg.data.train_count = 4;
  cfg.data.test_count = 2;
  SplitData d = build_datasets(cfg);

  cfg.model.kind = "dense-ae";
  cfg.model.latent = 16;
  ModelSpec spec = model_spec_from(cfg, d.train);
  CHECK(spec.kind == ModelKind::dense_ae);
  CHECK(spec.input_numel() == 784);

  cfg.model.kind = "conv-ae";
  spec = model_spec_from(cfg, d.train);
  CHECK(spec.kind == ModelKind::conv_ae);
  CHECK(spec.input_shape == std::vector<int>{1, 28, 28});

  cfg.model.kind = "classifier";
  spec = model_spec_from(cfg, d.train);
  CHECK(spec.kind == ModelKind::classifier);
  CHECK(spec.class_count == 10);

  cfg.model.kind = "mystery";
  CHECK_THROWS_WITH_AS(model_spec_from(cfg, d.train),
                       doctest::Contains("unknown model kind"), Error);

  Dataset flat;
  flat.split = "train";
  flat.samples.push_back(Tensor::zeros({12}));
  cfg.model.kind = "conv-ae";
  CHECK_THROWS_WITH_AS(model_spec_from(cfg, flat),
                       doctest::Contains("{c,h,w}"), Error);
}

TEST_CASE("train command writes checkpoint, report, and resolved config") {
  TempDir tmp("train");
  write_file(tmp.s("c.cfg"), small_config(5, tmp.s("out")));
  std::string out, err;
  int rc = run({"train", "--config", tmp.s("c.cfg")}, &out, &err);
  CHECK(rc == 0);
  CHECK(err.empty());
  CHECK(out.find("train train-") != std::string::npos);

  RunConfig cfg = parse_config_file(tmp.s("c.cfg"));
  std::string id = derive_run_id("train", cfg);
  std::string dir = tmp.s("out") + "/" + id;
  CHECK(fs::exists(dir + "/model.ckpt"));
  RunConfig resolved = parse_config_file(dir + "/resolved-config");
  CHECK(resolved.run.id == id);
  std::string report = read_file(dir + "/report.txt");
  CHECK(report.find("command=train\n") != std::string::npos);
  CHECK(report.find("epochs_run=2\n") != std::string::npos);
  CHECK(report.find("train_samples=16\n") != std::string::npos);
}

TEST_CASE("single-sample attack trace has exactly T rows") {
  TempDir tmp("trace");
  write_file(tmp.s("c.cfg"), small_config(6, tmp.s("out")));
  std::string out;
  int rc = run({"attack", "--config", tmp.s("c.cfg"), "--sample", "0"}, &out);
  CHECK(rc == 0);

  RunConfig cfg = parse_config_file(tmp.s("c.cfg"));
  cfg.attack.sample = 0;  // the override lands in the resolved config
  std::string dir = tmp.s("out") + "/" + derive_run_id("attack", cfg);
  RunConfig resolved = parse_config_file(dir + "/resolved-config");
  CHECK(resolved.attack.sample == 0);

  std::vector<std::string> rows =
      lines_of(read_file(dir + "/traces/trace_0.csv"));
  REQUIRE(static_cast<int>(rows.size()) == cfg.attack.T + 1);
  CHECK(rows[0] == "t,f,c,mi,stationarity_sq");
  for (int t = 1; t <= cfg.attack.T; ++t)
    CHECK(rows[static_cast<size_t>(t)].rfind(std::to_string(t) + ",", 0) == 0);

  std::vector<std::string> summary =
      lines_of(read_file(dir + "/summary.csv"));
  REQUIRE(summary.size() == 2);
  CHECK(summary[0] == "sample_id,success,best_mi,iters,wallclock_ms");
  CHECK(summary[1].rfind("0,", 0) == 0);
}

TEST_CASE("rerunning a persisted resolved config reproduces outputs") {
  TempDir tmp("rerun");
  write_file(tmp.s("c.cfg"), small_config(7, tmp.s("out")));
  int rc = run({"attack", "--config", tmp.s("c.cfg")});
  REQUIRE(rc == 0);

  RunConfig cfg = parse_config_file(tmp.s("c.cfg"));
  std::string dir = tmp.s("out") + "/" + derive_run_id("attack", cfg);
  std::string resolved0 = read_file(dir + "/resolved-config");
  std::string trace0 = read_file(dir + "/traces/trace_0.csv");
  std::string trace1 = read_file(dir + "/traces/trace_1.csv");
  std::string summary0 = read_file(dir + "/summary.csv");

  rc = run({"attack", "--config", dir + "/resolved-config"});
  REQUIRE(rc == 0);
  CHECK(read_file(dir + "/resolved-config") == resolved0);
  CHECK(read_file(dir + "/traces/trace_0.csv") == trace0);
  CHECK(read_file(dir + "/traces/trace_1.csv") == trace1);
  CHECK(mask_wallclock(read_file(dir + "/summary.csv")) ==
        mask_wallclock(summary0));
}

TEST_CASE("report renders every ledger row with its run id") {
  TempDir tmp("report");
  write_file(tmp.s("a.cfg"), small_config(21, tmp.s("out")));
  write_file(tmp.s("b.cfg"), small_config(22, tmp.s("out")));
  REQUIRE(run({"attack", "--config", tmp.s("a.cfg")}) == 0);
  REQUIRE(run({"attack", "--config", tmp.s("b.cfg")}) == 0);

  RunConfig ca = parse_config_file(tmp.s("a.cfg"));
  RunConfig cb = parse_config_file(tmp.s("b.cfg"));
  std::string ida = derive_run_id("attack", ca);
  std::string idb = derive_run_id("attack", cb);
  REQUIRE(ida != idb);

  std::string out;
  int rc = run({"report", "--out", tmp.s("out")}, &out);
  CHECK(rc == 0);
  CHECK(out.find(ida) != std::string::npos);
  CHECK(out.find(idb) != std::string::npos);
  CHECK(out.find("attack runs") != std::string::npos);
  CHECK(read_file(tmp.s("out") + "/report.txt") == out);
}

TEST_CASE("augment command persists both checkpoints and a ledger row") {
  TempDir tmp("augment");
  std::string cfg_text = small_config(8, tmp.s("out"));
  cfg_text += "[augment]\nmethod = gaussian\nsigma = 0.05\n";
  write_file(tmp.s("c.cfg"), cfg_text);
  std::string out;
  int rc = run({"augment", "--config", tmp.s("c.cfg")}, &out);
  CHECK(rc == 0);

  RunConfig cfg = parse_config_file(tmp.s("c.cfg"));
  std::string id = derive_run_id("augment", cfg);
  std::string dir = tmp.s("out") + "/" + id;
  CHECK(fs::exists(dir + "/model.ckpt"));
  CHECK(fs::exists(dir + "/retrained.ckpt"));
  std::string report = read_file(dir + "/report.txt");
  CHECK(report.find("method=gaussian\n") != std::string::npos);
  std::vector<std::string> ledger =
      lines_of(read_file(tmp.s("out") + "/augment-ledger.csv"));
  REQUIRE(ledger.size() == 2);
  CHECK(ledger[0].rfind("run,method,asr,", 0) == 0);
  CHECK(ledger[1].rfind(id + ",gaussian,", 0) == 0);
}

TEST_CASE("calibration gate decides the exit code") {
  TempDir tmp("calib");
  std::string base = "[run]\nseed = 3\nout = " + tmp.s("out") +
                     "\n[mine]\nhidden = 16\n"
                     "[calibrate]\nrho = 0.9\ndim = 2\nn = 64\nsteps = 0\n"
                     "batch_K = 32\nreps = 2\n";
  write_file(tmp.s("loose.cfg"), base + "tolerance = 0\n");
  write_file(tmp.s("strict.cfg"), base + "tolerance = 1e-9\n");

  std::string out, err;
  CHECK(run({"mine-calibrate", "--config", tmp.s("loose.cfg")}, &out, &err) ==
        0);
  CHECK(err.empty());
  CHECK(out.find("mine-calibrate mine-calibrate-") != std::string::npos);

  // an untrained net cannot hit a 1e-9 relative error
  CHECK(run({"mine-calibrate", "--config", tmp.s("strict.cfg")}, &out,
            &err) == 1);
  CHECK(err.find("outside tolerance") != std::string::npos);

  RunConfig cfg = parse_config_file(tmp.s("strict.cfg"));
  std::string dir = tmp.s("out") + "/" + derive_run_id("mine-calibrate", cfg);
  std::string report = read_file(dir + "/report.txt");
  CHECK(report.find("within_tolerance=false\n") != std::string::npos);
}

TEST_CASE("command line errors are reported with nonzero exit") {
  std::string out, err;
  CHECK(run({}, &out, &err) != 0);
  CHECK(run({"frobnicate"}, &out, &err) != 0);
  CHECK(run({"attack"}, &out, &err) != 0);

  CHECK(run({"attack", "--config", "/nonexistent.cfg"}, &out, &err) == 1);
  CHECK(err.find("cannot open") != std::string::npos);

  CHECK(run({"--help"}, &out, &err) == 0);
  CHECK(out.find("Usage") != std::string::npos);
}

TEST_CASE("cli overrides land in the resolved config before id derivation") {
  TempDir tmp("override");
  write_file(tmp.s("c.cfg"), small_config(9, tmp.s("out")));
  int rc = run({"train", "--config", tmp.s("c.cfg"), "--seed", "42", "--id",
                "my-run"});
  CHECK(rc == 0);
  RunConfig resolved =
      parse_config_file(tmp.s("out") + "/my-run/resolved-config");
  CHECK(resolved.run.seed == 42);
  CHECK(resolved.run.id == "my-run");
}
