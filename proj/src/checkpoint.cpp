#include "mmx/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace mmx {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'X', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw Error(std::string("checkpoint: truncated while reading ") + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw Error("checkpoint: truncated parameter payload");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& m) {
  m.spec.validate();
  std::vector<std::vector<int>> shapes = param_shapes(m.spec);
  if (shapes.size() != m.params.size())
    throw Error("checkpoint: parameter count does not match spec");
  for (size_t i = 0; i < shapes.size(); ++i)
    if (m.params[i].shape != shapes[i])
      throw Error("checkpoint: parameter " + std::to_string(i) +
                  " shape mismatch");

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<uint32_t>(m.spec.layers.size()));
  for (const LayerSpec& l : m.spec.layers) {
    put_u32(os, static_cast<uint32_t>(l.kind));
    put_u32(os, static_cast<uint32_t>(l.in));
    put_u32(os, static_cast<uint32_t>(l.out));
    put_u32(os, static_cast<uint32_t>(l.ksize));
  }
  for (const Tensor& p : m.params)
    for (double d : p.data) put_f64(os, d);
  if (!os) throw Error("checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path, const ModelSpec& spec) {
  spec.validate();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("checkpoint: bad magic in " + path);
  uint32_t version = get_u32(is, "version");
  if (version != kVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = get_u32(is, "layer count");
  if (count != spec.layers.size())
    throw Error("checkpoint: layer count " + std::to_string(count) +
                " does not match spec " + std::to_string(spec.layers.size()));
  for (const LayerSpec& l : spec.layers) {
    uint32_t kind = get_u32(is, "layer kind");
    uint32_t in = get_u32(is, "layer in");
    uint32_t out = get_u32(is, "layer out");
    uint32_t ksize = get_u32(is, "layer ksize");
    if (kind != static_cast<uint32_t>(l.kind) ||
        in != static_cast<uint32_t>(l.in) ||
        out != static_cast<uint32_t>(l.out) ||
        ksize != static_cast<uint32_t>(l.ksize))
      throw Error("checkpoint: layer table does not match spec");
  }
  ModelState m;
  m.spec = spec;
  for (const std::vector<int>& shape : param_shapes(spec)) {
    Tensor p(shape);
    for (int i = 0; i < p.numel(); ++i) p[i] = get_f64(is);
    m.params.push_back(std::move(p));
  }
  char extra;
  if (is.read(&extra, 1))
    throw Error("checkpoint: trailing bytes in " + path);
  return m;
}

}  // namespace mmx
