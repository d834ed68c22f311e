#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qpareto/layers.hpp"

namespace qpareto::stats {

/// Parameters of the mean-|w| variance law. rho is the averaged normalized
/// cross moment E[|w_i||w_j|] / sigma^2 over i != j; independent Gaussian
/// weights give rho = 2/pi.
struct VarianceParams {
  long d = 1;
  double sigma = 1.0;
  double rho = 0.0;
};

/// Var(mean|w|) = sigma^2/d + (d-1) rho sigma^2 / d - 2 sigma^2 / pi.
double variance_formula(const VarianceParams& p);

enum class CorrelationModel { Independent, Equicorrelated };

/// Which reading of "average correlation" to report back from sampling: the
/// cross-moment form used by the variance law, or the Pearson correlation of
/// the signed weights (kept for comparison only).
enum class RhoConvention { CrossMomentAbs, PearsonSigned };

struct MonteCarloResult {
  double var_mean_abs = 0.0;  // sample variance of mean|w| across trials
  double std_error = 0.0;     // standard error of that sample variance
  double rho_cross = 0.0;     // measured E|w_i||w_j| / sigma^2, i != j
  double rho_pearson = 0.0;   // measured E[w_i w_j] / sigma^2, i != j
  std::size_t n_trials = 0;
};

/// Draws n_trials weight vectors with the requested correlation structure and
/// measures Var(mean|w|) plus the empirical rho under both conventions.
/// Equicorrelated vectors use a shared Gaussian factor with weight sqrt(r).
MonteCarloResult variance_monte_carlo(long d, double sigma, CorrelationModel model, double r,
                                      std::size_t n_trials, std::uint64_t seed);

/// Per-step mean|w| tracker for selected conv layers (Fig-5-style protocol):
/// one series per output kernel, layer-level variance = mean over kernels of
/// the per-kernel sample variance across recorded steps.
class MeanAbsTracker {
 public:
  /// Tracks every Conv2d whose name contains `name_filter` (empty = all).
  explicit MeanAbsTracker(std::string name_filter = "", long skip_steps = 0)
      : filter_(std::move(name_filter)), skip_steps_(skip_steps) {}

  void observe(long step, nn::Model& model);

  struct LayerVariance {
    std::string layer;
    long fan_in = 0;    // d = (C_in/groups) * K * K
    long steps = 0;
    double variance = 0.0;
  };
  /// Requires at least 30 recorded steps per layer.
  std::vector<LayerVariance> layer_variances() const;

  long recorded_steps() const { return recorded_; }

 private:
  std::string filter_;
  long skip_steps_ = 0;
  long recorded_ = 0;
  // layer -> per-kernel series of mean|w|
  std::map<std::string, std::vector<std::vector<double>>> series_;
  std::map<std::string, long> fan_in_;
};

struct RunSummary {
  std::string family;
  std::string dataset;
  double accuracy = 0.0;  // percent
};

struct AccDecomposition {
  double acc_high_bit = 0.0;
  double acc_low_bit = 0.0;
  double acc_low_bit_grown = 0.0;
  double delta_q = 0.0;  // acc_low - acc_high
  double delta_g = 0.0;  // acc_low_grown - acc_low
};

/// Exact subtraction bookkeeping; delta_q + delta_g telescopes to the
/// end-to-end accuracy difference.
AccDecomposition decompose_accuracy(const RunSummary& high, const RunSummary& low,
                                    const RunSummary& low_grown);

}  // namespace qpareto::stats
