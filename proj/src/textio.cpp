#include "mmx/textio.hpp"

#include <cstdio>

#include "mmx/tensor.hpp"

namespace mmx {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_text_out(const std::string& path, bool append) {
  std::ios::openmode mode = std::ios::binary;
  if (append) mode |= std::ios::app;
  std::ofstream out(path, mode);
  if (!out) throw Error("cannot open " + path);
  return out;
}

void close_text_out(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw Error("write failed: " + path);
}

}  // namespace mmx
