#include "mmx/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mmx/checkpoint.hpp"
#include "mmx/data_io.hpp"
#include "mmx/rng.hpp"
#include "mmx/tensor.hpp"
#include "mmx/textio.hpp"

namespace mmx {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

uint64_t parse_u64(const std::string& v, const std::string& where) {
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw Error("config: bad unsigned integer '" + v + "' for " + where);
  }
}

int parse_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw Error("config: bad integer '" + v + "' for " + where);
  }
}

double parse_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw Error("config: bad number '" + v + "' for " + where);
  }
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw Error("config: bad bool '" + v + "' for " + where + " (true|false)");
}

std::vector<int> parse_int_list(const std::string& v,
                                const std::string& where) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(parse_int(trim(item), where));
  return out;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  // where = "[section] key", for error messages
  std::function<void(RunConfig&, const std::string& value,
                     const std::string& where)>
      set;
};

// registry in serialization order; parsing accepts any order
const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> v;
    // loc: callable mapping (possibly const) RunConfig& to the member
    auto add_str = [&v](const char* sec, const char* key, auto loc) {
      v.push_back({sec, key,
                   [loc](const RunConfig& c) { return loc(c); },
                   [loc](RunConfig& c, const std::string& s,
                         const std::string&) { loc(c) = s; }});
    };
    auto add_u64 = [&v](const char* sec, const char* key, auto loc) {
      v.push_back({sec, key,
                   [loc](const RunConfig& c) { return std::to_string(loc(c)); },
                   [loc](RunConfig& c, const std::string& s,
                         const std::string& w) { loc(c) = parse_u64(s, w); }});
    };
    auto add_int = [&v](const char* sec, const char* key, auto loc) {
      v.push_back({sec, key,
                   [loc](const RunConfig& c) { return std::to_string(loc(c)); },
                   [loc](RunConfig& c, const std::string& s,
                         const std::string& w) { loc(c) = parse_int(s, w); }});
    };
    auto add_dbl = [&v](const char* sec, const char* key, auto loc) {
      v.push_back({sec, key,
                   [loc](const RunConfig& c) { return fmt_g17(loc(c)); },
                   [loc](RunConfig& c, const std::string& s,
                         const std::string& w) { loc(c) = parse_double(s, w); }});
    };
    auto add_bool = [&v](const char* sec, const char* key, auto loc) {
      v.push_back({sec, key,
                   [loc](const RunConfig& c) {
                     return std::string(loc(c) ? "true" : "false");
                   },
                   [loc](RunConfig& c, const std::string& s,
                         const std::string& w) { loc(c) = parse_bool(s, w); }});
    };
    auto add_ints = [&v](const char* sec, const char* key, auto loc) {
      v.push_back({sec, key,
                   [loc](const RunConfig& c) { return fmt_int_list(loc(c)); },
                   [loc](RunConfig& c, const std::string& s,
                         const std::string& w) {
                     loc(c) = parse_int_list(s, w);
                   }});
    };

    add_u64("run", "seed", [](auto& c) -> auto& { return c.run.seed; });
    add_str("run", "out", [](auto& c) -> auto& { return c.run.out; });
    add_str("run", "id", [](auto& c) -> auto& { return c.run.id; });

    add_str("data", "source", [](auto& c) -> auto& { return c.data.source; });
    add_str("data", "train", [](auto& c) -> auto& { return c.data.train; });
    add_str("data", "train_labels",
            [](auto& c) -> auto& { return c.data.train_labels; });
    add_str("data", "test", [](auto& c) -> auto& { return c.data.test; });
    add_str("data", "test_labels",
            [](auto& c) -> auto& { return c.data.test_labels; });
    add_int("data", "train_count",
            [](auto& c) -> auto& { return c.data.train_count; });
    add_int("data", "test_count",
            [](auto& c) -> auto& { return c.data.test_count; });
    add_int("data", "csv_label_col",
            [](auto& c) -> auto& { return c.data.csv_label_col; });
    add_bool("data", "csv_header",
             [](auto& c) -> auto& { return c.data.csv_header; });
    add_bool("data", "csv_normalize",
             [](auto& c) -> auto& { return c.data.csv_normalize; });

    add_str("model", "kind", [](auto& c) -> auto& { return c.model.kind; });
    add_int("model", "latent", [](auto& c) -> auto& { return c.model.latent; });
    add_int("model", "hidden", [](auto& c) -> auto& { return c.model.hidden; });
    add_int("model", "filters",
            [](auto& c) -> auto& { return c.model.filters; });
    add_dbl("model", "lambda1",
            [](auto& c) -> auto& { return c.model.lambda1; });
    add_int("model", "epochs", [](auto& c) -> auto& { return c.model.epochs; });
    add_int("model", "batch", [](auto& c) -> auto& { return c.model.batch; });
    add_str("model", "opt", [](auto& c) -> auto& { return c.model.opt; });
    add_dbl("model", "lr", [](auto& c) -> auto& { return c.model.lr; });
    add_str("model", "checkpoint",
            [](auto& c) -> auto& { return c.model.checkpoint; });

    add_str("attack", "mode", [](auto& c) -> auto& { return c.attack.mode; });
    add_str("attack", "criterion",
            [](auto& c) -> auto& { return c.attack.criterion; });
    add_dbl("attack", "kappa", [](auto& c) -> auto& { return c.attack.kappa; });
    add_int("attack", "label", [](auto& c) -> auto& { return c.attack.label; });
    add_dbl("attack", "alpha", [](auto& c) -> auto& { return c.attack.alpha; });
    add_dbl("attack", "beta", [](auto& c) -> auto& { return c.attack.beta; });
    add_int("attack", "T", [](auto& c) -> auto& { return c.attack.T; });
    add_dbl("attack", "eps", [](auto& c) -> auto& { return c.attack.eps; });
    add_str("attack", "direction",
            [](auto& c) -> auto& { return c.attack.direction; });
    add_str("attack", "similarity",
            [](auto& c) -> auto& { return c.attack.similarity; });
    add_dbl("attack", "cbar", [](auto& c) -> auto& { return c.attack.cbar; });
    add_int("attack", "sample",
            [](auto& c) -> auto& { return c.attack.sample; });
    add_int("attack", "count", [](auto& c) -> auto& { return c.attack.count; });
    add_int("attack", "workers",
            [](auto& c) -> auto& { return c.attack.workers; });
    add_int("attack", "penalty_B",
            [](auto& c) -> auto& { return c.attack.penalty_B; });
    add_int("attack", "penalty_T_prime",
            [](auto& c) -> auto& { return c.attack.penalty_T_prime; });

    add_str("mine", "scheme", [](auto& c) -> auto& { return c.mine.scheme; });
    add_int("mine", "K", [](auto& c) -> auto& { return c.mine.K; });
    add_int("mine", "dprime", [](auto& c) -> auto& { return c.mine.dprime; });
    add_ints("mine", "hidden", [](auto& c) -> auto& { return c.mine.hidden; });
    add_dbl("mine", "lr", [](auto& c) -> auto& { return c.mine.lr; });
    add_int("mine", "t_inner",
            [](auto& c) -> auto& { return c.mine.t_inner; });

    add_str("augment", "method",
            [](auto& c) -> auto& { return c.augment.method; });
    add_dbl("augment", "sigma",
            [](auto& c) -> auto& { return c.augment.sigma; });
    add_dbl("augment", "rotation_deg",
            [](auto& c) -> auto& { return c.augment.rotation_deg; });
    add_dbl("augment", "retrain_epoch_ratio",
            [](auto& c) -> auto& { return c.augment.retrain_epoch_ratio; });

    add_dbl("calibrate", "rho",
            [](auto& c) -> auto& { return c.calibrate.rho; });
    add_int("calibrate", "dim",
            [](auto& c) -> auto& { return c.calibrate.dim; });
    add_int("calibrate", "n", [](auto& c) -> auto& { return c.calibrate.n; });
    add_int("calibrate", "steps",
            [](auto& c) -> auto& { return c.calibrate.steps; });
    add_int("calibrate", "batch_K",
            [](auto& c) -> auto& { return c.calibrate.batch_K; });
    add_dbl("calibrate", "lr",
            [](auto& c) -> auto& { return c.calibrate.lr; });
    add_int("calibrate", "reps",
            [](auto& c) -> auto& { return c.calibrate.reps; });
    add_dbl("calibrate", "tolerance",
            [](auto& c) -> auto& { return c.calibrate.tolerance; });
    return v;
  }();
  return table;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

bool known_section(const std::string& section) {
  for (const Field& f : fields())
    if (f.section == section) return true;
  return false;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw Error("config: malformed section header at line " +
                    std::to_string(lineno));
      section = trim(t.substr(1, t.size() - 2));
      if (!known_section(section))
        throw Error("config: unknown section [" + section + "] at line " +
                    std::to_string(lineno));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw Error("config: expected key = value at line " +
                  std::to_string(lineno));
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (section.empty())
      throw Error("config: key '" + key + "' outside any section at line " +
                  std::to_string(lineno));
    const Field* f = find_field(section, key);
    if (!f)
      throw Error("config: unknown key '" + key + "' in section [" + section +
                  "] at line " + std::to_string(lineno));
    f->set(cfg, value, "[" + section + "] " + key);
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

void write_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out = open_text_out(path);
  out << serialize_config(cfg);
  close_text_out(out, path);
}

std::string derive_run_id(const std::string& command, const RunConfig& cfg) {
  if (!cfg.run.id.empty()) return cfg.run.id;
  uint64_t h = sub_seed(0, command + "\n" + serialize_config(cfg));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return command + "-" + buf;
}

namespace {

void truncate_dataset(Dataset& d, int count) {
  if (count <= 0 || d.size() <= count) return;
  d.samples.resize(static_cast<size_t>(count));
  if (d.has_labels()) d.labels.resize(static_cast<size_t>(count));
}

Dataset load_split(const DataSection& data, const std::string& images,
                   const std::string& labels, const std::string& split) {
  Dataset d;
  if (images.empty()) {
    d.split = split;
    return d;
  }
  if (data.source == "idx") {
    d = labels.empty() ? load_idx(images) : load_idx_pair(images, labels);
  } else {
    CsvSchema schema;
    schema.label_col = data.csv_label_col;
    schema.header = data.csv_header;
    d = load_csv(images, schema);
  }
  d.split = split;
  return d;
}

}  // namespace

SplitData build_datasets(const RunConfig& cfg) {
  const DataSection& data = cfg.data;
  SplitData out;
  if (data.source == "synth-digits") {
    out.train = synth_digits(data.train_count,
                             sub_seed(cfg.run.seed, "data-train"), "train");
    out.test = synth_digits(data.test_count,
                            sub_seed(cfg.run.seed, "data-test"), "test");
    return out;
  }
  if (data.source != "idx" && data.source != "csv")
    throw Error("config: unknown data source '" + data.source + "'");
  out.train = load_split(data, data.train, data.train_labels, "train");
  out.test = load_split(data, data.test, data.test_labels, "test");
  if (out.train.size() == 0) throw Error("config: [data] train path required");
  truncate_dataset(out.train, data.train_count);
  truncate_dataset(out.test, data.test_count);
  if (data.source == "csv" && data.csv_normalize) {
    MinMaxStats stats = fit_minmax(out.train);
    apply_minmax(out.train, stats);
    if (out.test.size() > 0) apply_minmax(out.test, stats);
  }
  out.train.validate();
  if (out.test.size() > 0) out.test.validate();
  return out;
}

ModelSpec model_spec_from(const RunConfig& cfg, const Dataset& train) {
  if (train.size() == 0) throw Error("config: empty train split");
  const std::vector<int>& shape = train.samples[0].shape;
  int d = train.samples[0].numel();
  const std::string& kind = cfg.model.kind;
  if (kind == "dense-ae") return dense_ae_spec(d, cfg.model.latent);
  if (kind == "sparse-ae")
    return sparse_ae_spec(d, cfg.model.latent, cfg.model.lambda1);
  if (kind == "conv-ae") {
    if (shape.size() != 3)
      throw Error("config: conv-ae needs {c,h,w} samples");
    return conv_ae_spec(shape[0], shape[1], shape[2], cfg.model.filters);
  }
  if (kind == "classifier") {
    if (!train.has_labels())
      throw Error("config: classifier needs a labeled train split");
    int classes = 1 + *std::max_element(train.labels.begin(),
                                        train.labels.end());
    if (classes < 2) classes = 2;
    return classifier_spec(d, cfg.model.hidden, classes);
  }
  throw Error("config: unknown model kind '" + kind + "'");
}

TrainConfig train_config_from(const RunConfig& cfg) {
  TrainConfig tc;
  tc.epochs = cfg.model.epochs;
  tc.batch = cfg.model.batch;
  if (cfg.model.opt == "adam")
    tc.opt = OptKind::adam;
  else if (cfg.model.opt == "sgd")
    tc.opt = OptKind::sgd;
  else
    throw Error("config: unknown optimizer '" + cfg.model.opt + "'");
  tc.lr = cfg.model.lr;
  tc.seed = sub_seed(cfg.run.seed, "model-init");
  return tc;
}

ModelState obtain_model(const RunConfig& cfg, const Dataset& train) {
  ModelSpec spec = model_spec_from(cfg, train);
  if (!cfg.model.checkpoint.empty())
    return load_checkpoint(cfg.model.checkpoint, spec);
  return train_model(spec, train, train_config_from(cfg));
}

MiConfig mi_config_from(const RunConfig& cfg) {
  MiConfig mi;
  if (cfg.mine.scheme == "bank")
    mi.scheme = MiScheme::bank;
  else if (cfg.mine.scheme == "conv")
    mi.scheme = MiScheme::conv;
  else
    throw Error("config: unknown mine scheme '" + cfg.mine.scheme + "'");
  mi.K = cfg.mine.K;
  mi.dprime = cfg.mine.dprime;
  mi.hidden = cfg.mine.hidden;
  mi.lr = cfg.mine.lr;
  mi.t_inner = cfg.mine.t_inner;
  return mi;
}

AttackConfig attack_config_from(const RunConfig& cfg) {
  AttackConfig ac;
  ac.alpha = cfg.attack.alpha;
  ac.beta = cfg.attack.beta;
  ac.T = cfg.attack.T;
  ac.eps = cfg.attack.eps;
  ac.direction = direction_from_name(cfg.attack.direction);
  ac.similarity = similarity_from_name(cfg.attack.similarity);
  ac.mi = mi_config_from(cfg);
  ac.cbar = cfg.attack.cbar;
  ac.seed = cfg.run.seed;
  return ac;
}

PenaltySchedule penalty_schedule_from(const RunConfig& cfg) {
  PenaltySchedule s;
  s.B = cfg.attack.penalty_B;
  s.T_prime = cfg.attack.penalty_T_prime;
  return s;
}

AugmentationPlan augmentation_plan_from(const RunConfig& cfg) {
  AugmentationPlan plan;
  plan.method = augment_method_from_name(cfg.augment.method);
  plan.sigma = cfg.augment.sigma;
  plan.rotation_deg = cfg.augment.rotation_deg;
  plan.attack = attack_config_from(cfg);
  plan.n_workers = cfg.attack.workers;
  plan.retrain = train_config_from(cfg);
  plan.retrain_epoch_ratio = cfg.augment.retrain_epoch_ratio;
  plan.seed = cfg.run.seed;
  return plan;
}

}  // namespace mmx
