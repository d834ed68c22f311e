#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qpareto/tensor.hpp"

namespace qpareto::data {

struct Dataset {
  int classes = 0;
  int channels = 0, height = 0, width = 0;
  std::vector<double> images;  // count * channels * height * width
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  const double* image(std::size_t i) const { return images.data() + i * image_size(); }

  /// Copies the listed samples into one NCHW batch.
  nn::Tensor4 gather(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end,
                     std::vector<int>* batch_labels) const;
};

/// Structured synthetic images: each class is an oriented grating plus a
/// class-specific blob; samples get a random shift, amplitude jitter, and
/// Gaussian noise. Linearly separable enough for smoke-test training.
struct SyntheticSpec {
  int classes = 5;
  int hw = 32;
  int channels = 3;
  int train_per_class = 100;
  int val_per_class = 40;
  double noise = 0.25;
  std::uint64_t seed = 7;
};

struct SplitDataset {
  Dataset train, val;
};

SplitDataset make_synthetic(const SyntheticSpec& spec);

/// Reader for the classic CIFAR binary layout (one label byte, or a coarse +
/// fine pair for the 100-class variant, followed by 3072 image bytes).
Dataset load_cifar_binary(const std::vector<std::string>& files, int classes);

}  // namespace qpareto::data
