#include "qpareto/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

namespace qpareto::data {

nn::Tensor4 Dataset::gather(const std::vector<std::size_t>& idx, std::size_t begin,
                            std::size_t end, std::vector<int>* batch_labels) const {
  const int n = static_cast<int>(end - begin);
  nn::Tensor4 batch(n, channels, height, width);
  if (batch_labels) batch_labels->resize(n);
  for (int b = 0; b < n; ++b) {
    const std::size_t i = idx[begin + b];
    const double* src = image(i);
    std::copy(src, src + image_size(), batch.data() + b * image_size());
    if (batch_labels) (*batch_labels)[b] = labels[i];
  }
  return batch;
}

namespace {

void render_sample(double* dst, int cls, const SyntheticSpec& spec, std::mt19937_64& rng) {
  const int hw = spec.hw;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // class-specific grating
  const double angle = std::numbers::pi * cls / spec.classes;
  const double freq = 2.0 + (cls % 3);
  const double cx = std::cos(angle), sx = std::sin(angle);
  // class-specific blob corner
  const double bx = (cls % 2 == 0) ? 0.25 : 0.75;
  const double by = ((cls / 2) % 2 == 0) ? 0.25 : 0.75;

  const double amp = 0.8 + 0.4 * unif(rng);
  const int shift_h = static_cast<int>(unif(rng) * 5) - 2;
  const int shift_w = static_cast<int>(unif(rng) * 5) - 2;

  for (int c = 0; c < spec.channels; ++c) {
    const double phase = 0.5 * c;
    for (int h = 0; h < hw; ++h) {
      for (int w = 0; w < hw; ++w) {
        const int hh = ((h + shift_h) % hw + hw) % hw;
        const int ww = ((w + shift_w) % hw + hw) % hw;
        const double u = static_cast<double>(hh) / hw;
        const double v = static_cast<double>(ww) / hw;
        const double grating = std::sin(2.0 * std::numbers::pi * freq * (cx * u + sx * v) + phase);
        const double du = u - by, dv = v - bx;
        const double blob = 1.5 * std::exp(-(du * du + dv * dv) / 0.02);
        dst[(static_cast<std::size_t>(c) * hw + h) * hw + w] =
            amp * (grating + blob) + spec.noise * gauss(rng);
      }
    }
  }
}

Dataset make_part(const SyntheticSpec& spec, int per_class, std::uint64_t seed) {
  Dataset d;
  d.classes = spec.classes;
  d.channels = spec.channels;
  d.height = spec.hw;
  d.width = spec.hw;
  const std::size_t n = static_cast<std::size_t>(per_class) * spec.classes;
  d.images.resize(n * d.image_size());
  d.labels.resize(n);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % spec.classes);
    d.labels[i] = cls;
    render_sample(d.images.data() + i * d.image_size(), cls, spec, rng);
  }
  return d;
}

}  // namespace

SplitDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.hw < 4 || spec.channels < 1) {
    throw std::invalid_argument("make_synthetic: bad spec");
  }
  SplitDataset out;
  out.train = make_part(spec, spec.train_per_class, spec.seed);
  out.val = make_part(spec, spec.val_per_class, spec.seed + 0x9e3779b9ULL);
  return out;
}

Dataset load_cifar_binary(const std::vector<std::string>& files, int classes) {
  if (classes != 10 && classes != 100) {
    throw std::invalid_argument("load_cifar_binary: classes must be 10 or 100");
  }
  Dataset d;
  d.classes = classes;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  const std::size_t label_bytes = (classes == 100) ? 2 : 1;
  const std::size_t rec = label_bytes + 3072;

  for (const auto& path : files) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_cifar_binary: cannot open " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() % rec != 0) {
      throw std::runtime_error("load_cifar_binary: " + path + " is not a whole number of records");
    }
    const std::size_t n = buf.size() / rec;
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* r = reinterpret_cast<const unsigned char*>(buf.data()) + i * rec;
      // 100-class files store the coarse label first; the fine label is used
      d.labels.push_back(static_cast<int>(r[label_bytes - 1]));
      for (std::size_t j = 0; j < 3072; ++j) {
        d.images.push_back(static_cast<double>(r[label_bytes + j]) / 255.0 - 0.5);
      }
    }
  }
  return d;
}

}  // namespace qpareto::data
