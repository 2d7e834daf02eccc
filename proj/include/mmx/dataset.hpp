#pragma once

#include <string>
#include <vector>

#include "mmx/tensor.hpp"

namespace mmx {

// Samples share one shape and live in [0,1]. Labels, when present, align 1:1.
struct Dataset {
  std::vector<Tensor> samples;
  std::vector<int> labels;
  std::string split;       // "train" or "test"
  std::string provenance;

  bool has_labels() const { return !labels.empty(); }
  int size() const { return static_cast<int>(samples.size()); }
  void validate() const;
};

}  // namespace mmx
