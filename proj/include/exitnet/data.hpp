#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "exitnet/tensor.hpp"

namespace exitnet {

// Labeled image set, stored flat as [N, C, H, W] row-major doubles.
struct Dataset {
  std::size_t num_classes = 0;
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> images;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return channels * height * width; }
  Tensor batch(const std::vector<std::size_t>& idx) const;
  Tensor image(std::size_t i) const;  // [1,C,H,W]
};

// Procedural shape classes drawn with per-sample position, size and intensity
// jitter plus Gaussian pixel noise. Ten primitives are defined; asking for
// more classes is a configuration error. Pixels come back raw (roughly [0,1]);
// run standardize() before feeding a model.
Dataset make_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t channels,
                       std::size_t height, std::size_t width, std::uint64_t seed);

// idx-format pairs (big-endian, magic 0x803 for images, 0x801 for labels).
// Pixels are scaled to [0,1]; the class count is one past the largest label.
Dataset load_idx(const std::string& images_file, const std::string& labels_file);

// In-place whitening by the dataset's own scalar mean and standard deviation.
// Returns {mean, std} as computed before the transform.
std::pair<double, double> standardize(Dataset& d);

// Splits class-by-class so both sides keep the label balance; `fraction` of
// each class (rounded) lands in the first result. Selection is shuffled by
// seed, output runs class-major.
std::pair<Dataset, Dataset> stratified_split(const Dataset& d, double fraction,
                                             std::uint64_t seed);

}  // namespace exitnet
