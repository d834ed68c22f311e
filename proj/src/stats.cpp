#include "qpareto/stats.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "qpareto/quant.hpp"

namespace qpareto::stats {

double variance_formula(const VarianceParams& p) {
  if (p.d < 1 || !(p.sigma > 0.0)) throw std::invalid_argument("variance_formula: bad params");
  const double s2 = p.sigma * p.sigma;
  const double d = static_cast<double>(p.d);
  return s2 / d + (d - 1.0) * p.rho * s2 / d - 2.0 * s2 / std::numbers::pi;
}

MonteCarloResult variance_monte_carlo(long d, double sigma, CorrelationModel model, double r,
                                      std::size_t n_trials, std::uint64_t seed) {
  if (n_trials < 1000) throw std::invalid_argument("variance_monte_carlo: need >= 1000 trials");
  if (d < 1 || !(sigma > 0.0)) throw std::invalid_argument("variance_monte_carlo: bad params");
  if (model == CorrelationModel::Equicorrelated && (r < 0.0 || r >= 1.0)) {
    throw std::invalid_argument("variance_monte_carlo: equicorrelation must lie in [0, 1)");
  }
  const double shared = (model == CorrelationModel::Equicorrelated) ? std::sqrt(r) : 0.0;
  const double indep = std::sqrt(1.0 - shared * shared);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> samples(n_trials);
  double cross_sum = 0.0, pearson_sum = 0.0;
  for (std::size_t t = 0; t < n_trials; ++t) {
    const double z0 = gauss(rng);
    double sum_abs = 0.0, sum = 0.0, sum_sq = 0.0;
    for (long i = 0; i < d; ++i) {
      const double w = sigma * (shared * z0 + indep * gauss(rng));
      sum_abs += std::abs(w);
      sum += w;
      sum_sq += w * w;
    }
    samples[t] = sum_abs / static_cast<double>(d);
    if (d > 1) {
      // pair sums via (sum)^2 - sum of squares
      const double dd = static_cast<double>(d) * (d - 1.0);
      cross_sum += (sum_abs * sum_abs - sum_sq) / dd;
      pearson_sum += (sum * sum - sum_sq) / dd;
    }
  }

  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= static_cast<double>(n_trials);
  double m2 = 0.0, m4 = 0.0;
  for (double v : samples) {
    const double c = v - mean;
    m2 += c * c;
    m4 += c * c * c * c;
  }
  const double n = static_cast<double>(n_trials);
  const double var = m2 / (n - 1.0);
  m2 /= n;
  m4 /= n;
  // variance of the sample variance, via the fourth central moment
  const double var_of_var = (m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n;

  MonteCarloResult out;
  out.var_mean_abs = var;
  out.std_error = std::sqrt(std::max(0.0, var_of_var));
  out.rho_cross = (d > 1) ? cross_sum / n / (sigma * sigma) : 0.0;
  out.rho_pearson = (d > 1) ? pearson_sum / n / (sigma * sigma) : 0.0;
  out.n_trials = n_trials;
  return out;
}

void MeanAbsTracker::observe(long step, nn::Model& model) {
  if (step <= skip_steps_) return;
  ++recorded_;
  auto record_conv = [this](nn::Conv2d& conv) {
    if (!filter_.empty() && conv.name().find(filter_) == std::string::npos) return;
    const nn::Param& w = conv.weight();
    const int rows = w.dims[0];
    const std::size_t row_len = w.size() / rows;
    auto& series = series_[conv.name()];
    if (series.empty()) {
      series.resize(rows);
      fan_in_[conv.name()] = static_cast<long>(row_len);
    }
    for (int rr = 0; rr < rows; ++rr) {
      series[rr].push_back(quant::mean_abs({w.value.data() + rr * row_len, row_len}));
    }
  };
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    model.layer(i).visit_convs(record_conv);
  }
}

std::vector<MeanAbsTracker::LayerVariance> MeanAbsTracker::layer_variances() const {
  std::vector<LayerVariance> out;
  for (const auto& [layer, series] : series_) {
    LayerVariance lv;
    lv.layer = layer;
    lv.fan_in = fan_in_.at(layer);
    lv.steps = series.empty() ? 0 : static_cast<long>(series[0].size());
    if (lv.steps < 30) {
      throw std::runtime_error("MeanAbsTracker: layer '" + layer + "' has only " +
                               std::to_string(lv.steps) + " recorded steps (need >= 30)");
    }
    double acc = 0.0;
    for (const auto& kernel_series : series) {
      double mean = 0.0;
      for (double v : kernel_series) mean += v;
      mean /= static_cast<double>(kernel_series.size());
      double ss = 0.0;
      for (double v : kernel_series) ss += (v - mean) * (v - mean);
      acc += ss / (static_cast<double>(kernel_series.size()) - 1.0);
    }
    lv.variance = acc / static_cast<double>(series.size());
    out.push_back(lv);
  }
  return out;
}

AccDecomposition decompose_accuracy(const RunSummary& high, const RunSummary& low,
                                    const RunSummary& low_grown) {
  if (high.family != low.family || low.family != low_grown.family) {
    throw std::invalid_argument("decompose_accuracy: family mismatch (" + high.family + ", " +
                                low.family + ", " + low_grown.family + ")");
  }
  if (high.dataset != low.dataset || low.dataset != low_grown.dataset) {
    throw std::invalid_argument("decompose_accuracy: dataset mismatch");
  }
  AccDecomposition d;
  d.acc_high_bit = high.accuracy;
  d.acc_low_bit = low.accuracy;
  d.acc_low_bit_grown = low_grown.accuracy;
  d.delta_q = low.accuracy - high.accuracy;
  d.delta_g = low_grown.accuracy - low.accuracy;
  return d;
}

}  // namespace qpareto::stats
