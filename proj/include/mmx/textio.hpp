#pragma once

#include <fstream>
#include <string>

namespace mmx {

// %.17g carries enough digits to round-trip a double exactly
std::string fmt_g17(double v);

// binary mode keeps line endings stable across platforms; throws on failure
std::ofstream open_text_out(const std::string& path, bool append = false);

// flushes and verifies the stream state
void close_text_out(std::ofstream& out, const std::string& path);

}  // namespace mmx
