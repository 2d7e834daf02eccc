#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mmx {

// Every random draw in the toolkit flows from one root seed through named
// sub-streams ("model-init", "attack:7", ...), so each component can be
// reproduced in isolation. sub_seed is a stable hash, not engine state.
uint64_t sub_seed(uint64_t root, std::string_view stream_name);

// Deterministic generator. All distributions are implemented on top of the
// raw mt19937_64 stream (no std::*_distribution), so sequences are
// bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // [0,1), 53-bit resolution
  double uniform01();

  // (lo, hi) uniform; used for parameter init
  double uniform(double lo, double hi);

  // Box-Muller; second value of each pair is cached
  double normal(double mean = 0.0, double sd = 1.0);

  // unbiased draw from [0, n)
  uint64_t below(uint64_t n);

  // Fisher-Yates permutation of 0..n-1
  std::vector<int> permutation(int n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mmx
