#include "mmx/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmx/rng.hpp"

namespace mmx {

void Dataset::validate() const {
  if (!labels.empty() && labels.size() != samples.size())
    throw Error("dataset: label count does not align with samples");
  for (size_t i = 1; i < samples.size(); ++i)
    if (!samples[i].same_shape(samples[0]))
      throw Error("dataset: ragged sample shapes");
  for (const Tensor& s : samples)
    for (double v : s.data)
      if (!(v >= 0.0 && v <= 1.0))
        throw Error("dataset: value outside [0,1]");
}

namespace {

constexpr uint32_t kImageMagic = 0x00000803;
constexpr uint32_t kLabelMagic = 0x00000801;

uint32_t get_be32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw Error(std::string("idx: truncated while reading ") + what);
  return (static_cast<uint32_t>(b[0]) << 24) |
         (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

void put_be32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>((v >> 24) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>(v & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("idx: cannot open " + path);
  uint32_t magic = get_be32(is, "magic");
  Dataset d;
  if (magic == kImageMagic) {
    uint32_t n = get_be32(is, "count");
    uint32_t h = get_be32(is, "rows");
    uint32_t w = get_be32(is, "cols");
    if (n > (1u << 24) || h > 4096 || w > 4096)
      throw Error("idx: dimension overflow in " + path);
    size_t total = static_cast<size_t>(n) * h * w;
    std::vector<unsigned char> buf(total);
    if (total > 0 && !is.read(reinterpret_cast<char*>(buf.data()),
                              static_cast<std::streamsize>(total)))
      throw Error("idx: truncated payload in " + path);
    d.samples.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
      Tensor t(std::vector<int>{1, static_cast<int>(h), static_cast<int>(w)});
      for (uint32_t p = 0; p < h * w; ++p)
        t[static_cast<int>(p)] =
            buf[static_cast<size_t>(i) * h * w + p] / 255.0;
      d.samples.push_back(std::move(t));
    }
  } else if (magic == kLabelMagic) {
    uint32_t n = get_be32(is, "count");
    if (n > (1u << 24)) throw Error("idx: dimension overflow in " + path);
    std::vector<unsigned char> buf(n);
    if (n > 0 && !is.read(reinterpret_cast<char*>(buf.data()), n))
      throw Error("idx: truncated payload in " + path);
    d.labels.assign(buf.begin(), buf.end());
  } else {
    std::ostringstream os;
    os << "idx: bad magic 0x" << std::hex << magic << " in " << path;
    throw Error(os.str());
  }
  char extra;
  if (is.read(&extra, 1)) throw Error("idx: trailing bytes in " + path);
  d.provenance = path;
  return d;
}

Dataset load_idx_pair(const std::string& images_path,
                      const std::string& labels_path) {
  Dataset images = load_idx(images_path);
  Dataset labels = load_idx(labels_path);
  if (images.samples.empty() || !labels.samples.empty() ||
      labels.labels.size() != images.samples.size())
    throw Error("idx: image/label pair mismatch");
  images.labels = std::move(labels.labels);
  images.provenance = images_path + " + " + labels_path;
  return images;
}

void write_idx_images(const std::string& path, const std::vector<int>& dims,
                      const std::vector<uint8_t>& bytes) {
  if (dims.size() != 3) throw Error("idx: writer expects {n,h,w}");
  size_t expect = static_cast<size_t>(dims[0]) * dims[1] * dims[2];
  if (bytes.size() != expect) throw Error("idx: payload size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("idx: cannot open " + path + " for writing");
  put_be32(os, kImageMagic);
  for (int v : dims) put_be32(os, static_cast<uint32_t>(v));
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("idx: write failed for " + path);
}

void write_idx_images(const std::string& path,
                      const std::vector<Tensor>& samples) {
  if (samples.empty()) throw Error("idx: nothing to write");
  int per = samples[0].numel();
  int h, w;
  if (samples[0].ndim() == 3) {
    h = samples[0].dim(1);
    w = samples[0].dim(2);
  } else if (samples[0].ndim() == 2) {
    h = samples[0].dim(0);
    w = samples[0].dim(1);
  } else {
    throw Error("idx: writer needs {1,h,w} or {h,w} samples");
  }
  std::vector<uint8_t> bytes;
  bytes.reserve(samples.size() * static_cast<size_t>(per));
  for (const Tensor& s : samples) {
    if (s.numel() != per) throw Error("idx: ragged samples");
    for (double v : s.data)
      bytes.push_back(static_cast<uint8_t>(
          std::lround(std::min(1.0, std::max(0.0, v)) * 255.0)));
  }
  write_idx_images(path, {static_cast<int>(samples.size()), h, w}, bytes);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("idx: cannot open " + path + " for writing");
  put_be32(os, kLabelMagic);
  put_be32(os, static_cast<uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw Error("idx: label outside u8 range");
    char b = static_cast<char>(l);
    os.write(&b, 1);
  }
  if (!os) throw Error("idx: write failed for " + path);
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream is(path);
  if (!is) throw Error("csv: cannot open " + path);
  Dataset d;
  std::string line;
  int expected_cols = -1;
  int lineno = 0;
  bool skip_header = schema.header;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (skip_header) {
      skip_header = false;
      continue;
    }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        size_t used = 0;
        double v = std::stod(cell, &used);
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
        if (used != cell.size()) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        throw Error("csv: non-numeric cell '" + cell + "' at line " +
                    std::to_string(lineno) + " of " + path);
      }
    }
    if (expected_cols < 0) expected_cols = static_cast<int>(row.size());
    if (static_cast<int>(row.size()) != expected_cols)
      throw Error("csv: column count mismatch at line " +
                  std::to_string(lineno) + " of " + path);
    std::vector<double> feats;
    for (int c = 0; c < expected_cols; ++c) {
      if (c == schema.label_col) {
        d.labels.push_back(static_cast<int>(std::lround(row[static_cast<size_t>(c)])));
      } else {
        feats.push_back(row[static_cast<size_t>(c)]);
      }
    }
    d.samples.push_back(Tensor::row(std::move(feats)));
  }
  if (d.samples.empty()) throw Error("csv: no rows in " + path);
  d.provenance = path;
  return d;
}

MinMaxStats fit_minmax(const Dataset& train) {
  if (train.samples.empty()) throw Error("minmax: empty train split");
  int dim = train.samples[0].numel();
  MinMaxStats s;
  s.lo.assign(static_cast<size_t>(dim), 1e300);
  s.hi.assign(static_cast<size_t>(dim), -1e300);
  for (const Tensor& t : train.samples)
    for (int i = 0; i < dim; ++i) {
      s.lo[static_cast<size_t>(i)] = std::min(s.lo[static_cast<size_t>(i)], t[i]);
      s.hi[static_cast<size_t>(i)] = std::max(s.hi[static_cast<size_t>(i)], t[i]);
    }
  return s;
}

void apply_minmax(Dataset& d, const MinMaxStats& stats) {
  int dim = static_cast<int>(stats.lo.size());
  for (Tensor& t : d.samples) {
    if (t.numel() != dim) throw Error("minmax: feature count mismatch");
    for (int i = 0; i < dim; ++i) {
      double range = stats.hi[static_cast<size_t>(i)] - stats.lo[static_cast<size_t>(i)];
      double v = range > 0 ? (t[i] - stats.lo[static_cast<size_t>(i)]) / range : 0.0;
      t[i] = std::min(1.0, std::max(0.0, v));
    }
  }
}

double gaussian_pair_mi(double rho, int dim) {
  if (!(std::fabs(rho) < 1)) throw Error("gaussian pairs: |rho| must be < 1");
  return -0.5 * dim * std::log(1 - rho * rho);
}

PairedDataset synth_gaussian_pairs(double rho, int dim, int n, uint64_t seed) {
  if (!(std::fabs(rho) < 1)) throw Error("gaussian pairs: |rho| must be < 1");
  if (dim <= 0 || n <= 0) throw Error("gaussian pairs: dim and n must be positive");
  PairedDataset out;
  out.analytic_mi = gaussian_pair_mi(rho, dim);
  Rng rng(seed);
  double comp = std::sqrt(1 - rho * rho);
  // fixed squash: x/8 + 0.5 covers +-4 sigma; tails clip with mass ~6e-5
  auto squash = [](double x) {
    return std::min(1.0, std::max(0.0, x / 8.0 + 0.5));
  };
  for (int i = 0; i < n; ++i) {
    Tensor u(std::vector<int>{dim}), v(std::vector<int>{dim});
    for (int j = 0; j < dim; ++j) {
      double z1 = rng.normal();
      double z2 = rng.normal();
      u[j] = squash(z1);
      v[j] = squash(rho * z1 + comp * z2);
    }
    out.first.push_back(std::move(u));
    out.second.push_back(std::move(v));
  }
  return out;
}

namespace {

struct Seg {
  double x0, y0, x1, y1;
};

// seven-segment strokes on a 28x28 canvas
const Seg kSegs[7] = {
    {8, 5, 20, 5},    // top
    {20, 5, 20, 14},  // top right
    {20, 14, 20, 23}, // bottom right
    {8, 23, 20, 23},  // bottom
    {8, 14, 8, 23},   // bottom left
    {8, 5, 8, 14},    // top left
    {8, 14, 20, 14},  // middle
};

const int kDigitSegs[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8
    0b1101111,  // 9: ABCDFG
};

double seg_dist(const Seg& s, double x, double y) {
  double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  double len2 = dx * dx + dy * dy;
  double t = ((x - s.x0) * dx + (y - s.y0) * dy) / len2;
  t = std::min(1.0, std::max(0.0, t));
  double px = s.x0 + t * dx - x, py = s.y0 + t * dy - y;
  return std::sqrt(px * px + py * py);
}

}  // namespace

Dataset synth_digits(int n, uint64_t seed, const std::string& split) {
  if (n <= 0) throw Error("synth digits: count must be positive");
  Dataset d;
  d.split = split;
  d.provenance = "synthetic digit glyphs";
  Rng rng(sub_seed(seed, "digits:" + split));
  for (int i = 0; i < n; ++i) {
    int digit = static_cast<int>(rng.below(10));
    double theta = rng.uniform(-0.2, 0.2);
    double scale = rng.uniform(0.9, 1.1);
    double dx = rng.uniform(-2, 2);
    double dy = rng.uniform(-2, 2);
    double thick = rng.uniform(1.4, 2.0);
    double ct = std::cos(theta), st = std::sin(theta);
    Tensor img = Tensor::zeros({1, 28, 28});
    int mask = kDigitSegs[digit];
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 28; ++x) {
        // inverse map into glyph space around the canvas center
        double cx = x - 14.0 - dx, cy = y - 14.0 - dy;
        double gx = (ct * cx + st * cy) / scale + 14.0;
        double gy = (-st * cx + ct * cy) / scale + 14.0;
        double best = 1e30;
        for (int s = 0; s < 7; ++s)
          if (mask & (1 << s)) best = std::min(best, seg_dist(kSegs[s], gx, gy));
        double v = 1.0 - best / thick;
        img[y * 28 + x] = std::min(1.0, std::max(0.0, v));
      }
    d.samples.push_back(std::move(img));
    d.labels.push_back(digit);
  }
  return d;
}

}  // namespace mmx
