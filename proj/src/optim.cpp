#include "qpareto/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace qpareto::nn {

double LrSchedule::at(long step) const {
  if (step < 0) throw std::invalid_argument("LrSchedule: negative step");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const long span = total_steps - warmup_steps;
  if (span <= 0) return base_lr;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

void SgdNesterov::step(std::vector<Param*>& params, double lr) {
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i]->size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    std::vector<double>& v = velocity_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j] + wd_ * p.value[j];
      v[j] = momentum_ * v[j] + g;
      p.value[j] -= lr * (g + momentum_ * v[j]);
    }
  }
}

}  // namespace qpareto::nn
