#pragma once

#include <cstdint>
#include <vector>

#include "qpareto/tensor.hpp"

namespace qpareto::nn {

/// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
/// at total_steps.
struct LrSchedule {
  double base_lr = 0.05;
  long warmup_steps = 0;
  long total_steps = 1;

  double at(long step) const;
};

/// SGD with Nesterov momentum and decoupled real-valued master weights:
///   g = grad + weight_decay * w
///   v = momentum * v + g
///   w -= lr * (g + momentum * v)
class SgdNesterov {
 public:
  SgdNesterov(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

  void step(std::vector<Param*>& params, double lr);

  const std::vector<std::vector<double>>& velocity() const { return velocity_; }
  void set_velocity(std::vector<std::vector<double>> v) { velocity_ = std::move(v); }

 private:
  double momentum_, wd_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace qpareto::nn
