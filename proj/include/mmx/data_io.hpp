#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmx/dataset.hpp"

namespace mmx {

// IDX ingestion: big-endian magic 0x00000803 (u8 images, scaled to [0,1]) or
// 0x00000801 (labels). Detects which by the magic.
Dataset load_idx(const std::string& path);
// merges an image dataset with a label dataset of equal count
Dataset load_idx_pair(const std::string& images_path,
                      const std::string& labels_path);

// fixture writers; images are quantized to u8 by rounding v*255
void write_idx_images(const std::string& path, const std::vector<int>& dims,
                      const std::vector<uint8_t>& bytes);
void write_idx_images(const std::string& path,
                      const std::vector<Tensor>& samples);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// CSV ingestion: numeric cells, comma separated, optional label column.
// Values come back raw; normalization is a separate train-statistics step.
struct CsvSchema {
  int label_col = -1;
  bool header = false;
};
Dataset load_csv(const std::string& path, const CsvSchema& schema);

// per-feature min-max statistics fitted on the train split only
struct MinMaxStats {
  std::vector<double> lo, hi;
};
MinMaxStats fit_minmax(const Dataset& train);
// maps to [0,1] and clamps; constant features map to 0
void apply_minmax(Dataset& d, const MinMaxStats& stats);

// paired samples for estimator calibration
struct PairedDataset {
  std::vector<Tensor> first, second;  // equal length, shape {dim}
  double analytic_mi = 0;
};
// per-coordinate correlation rho, squashed into [0,1] by a fixed affine map
// with tail clipping; closed-form MI of the underlying Gaussians attached
PairedDataset synth_gaussian_pairs(double rho, int dim, int n, uint64_t seed);
double gaussian_pair_mi(double rho, int dim);

// procedural 28x28 digit glyphs with per-sample jitter; labeled, values in
// [0,1], samples shaped {1,28,28}
Dataset synth_digits(int n, uint64_t seed, const std::string& split);

}  // namespace mmx
