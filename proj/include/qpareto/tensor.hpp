#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qpareto::nn {

struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense NCHW tensor of doubles.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 s) : shape_(s), data_(s.size(), 0.0) {}
  Tensor4(int n, int c, int h, int w) : Tensor4(Shape4{n, c, h, w}) {}

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  double at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

 private:
  Shape4 shape_;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> xs) {
  for (double v : xs) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

/// Trainable parameter with its gradient buffer. dims follow the layer's
/// natural layout, e.g. (C_out, C_in/groups, K, K) for a convolution.
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, std::vector<int> d) : name(std::move(n)), dims(std::move(d)) {
    std::size_t total = 1;
    for (int x : dims) total *= static_cast<std::size_t>(x);
    value.assign(total, 0.0);
    grad.assign(total, 0.0);
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

}  // namespace qpareto::nn
