#include "qpareto/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace qpareto::quant {

void QuantSpec::validate() const {
  if (!bitwidth) return;
  const int b = *bitwidth;
  if (b < 1 || b > 8) {
    throw std::invalid_argument("QuantSpec: bitwidth must be in [1, 8], got " +
                                std::to_string(b));
  }
  if (b > 2 && !(clip_ratio_c > 0.0)) {
    throw std::invalid_argument("QuantSpec: clip_ratio_c must be positive for bitwidth > 2");
  }
  if (!(ternary_threshold > 0.0) || ternary_threshold > 1.0) {
    throw std::invalid_argument("QuantSpec: ternary_threshold must lie in (0, 1]");
  }
}

double mean_abs(std::span<const double> row) {
  if (row.empty()) throw std::invalid_argument("mean_abs: empty filter");
  // compensated summation keeps the derived scale stable to a couple of ulps
  // independent of d, which the idempotence contract relies on
  double acc = 0.0, comp = 0.0;
  for (double w : row) {
    const double v = std::abs(w) - comp;
    const double t = acc + v;
    comp = (t - acc) - v;
    acc = t;
  }
  return acc / static_cast<double>(row.size());
}

void quantize_uniform_into(std::span<const double> row, int bitwidth, double clip,
                           std::span<double> out) {
  if (bitwidth < 3) throw std::invalid_argument("quantize_uniform: wrong scheme (need bitwidth >= 3)");
  if (!(clip > 0.0)) throw std::invalid_argument("quantize_uniform: invalid clip (need a > 0)");
  if (row.empty()) throw std::invalid_argument("quantize_uniform: empty filter");
  if (out.size() != row.size()) throw std::invalid_argument("quantize_uniform: output size mismatch");

  const double levels = static_cast<double>((1 << (bitwidth - 1)) - 1);
  const double r = clip / levels;
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double w = std::clamp(row[j], -clip, clip);
    out[j] = round_half_away(w / r) * r;
  }
}

void quantize_ternary_into(std::span<const double> row, double threshold,
                           TernaryMask mask, std::span<double> out) {
  if (row.empty()) throw std::invalid_argument("quantize_ternary: empty filter");
  if (out.size() != row.size()) throw std::invalid_argument("quantize_ternary: output size mismatch");
  const double scale = mean_abs(row);
  const double cutoff = threshold * scale;
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double w = row[j];
    const bool keep = (mask == TernaryMask::Magnitude) ? std::abs(w) >= cutoff : w >= cutoff;
    out[j] = keep ? sign_pm(w) * scale : 0.0;
  }
}

void quantize_binary_into(std::span<const double> row, std::span<double> out) {
  if (row.empty()) throw std::invalid_argument("quantize_binary: empty filter");
  if (out.size() != row.size()) throw std::invalid_argument("quantize_binary: output size mismatch");
  const double scale = mean_abs(row);
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = sign_pm(row[j]) * scale;
}

void quantize_dispatch_into(std::span<const double> row, const QuantSpec& spec,
                            std::span<double> out) {
  spec.validate();
  if (!spec.bitwidth) {
    std::copy(row.begin(), row.end(), out.begin());
    return;
  }
  switch (*spec.bitwidth) {
    case 1:
      quantize_binary_into(row, out);
      return;
    case 2:
      quantize_ternary_into(row, spec.ternary_threshold, spec.ternary_mask, out);
      return;
    default: {
      const double clip = mean_abs(row) / spec.clip_ratio_c;
      if (clip == 0.0) {
        // all-zero row: every grid point collapses to 0
        std::fill(out.begin(), out.end(), 0.0);
        return;
      }
      quantize_uniform_into(row, *spec.bitwidth, clip, out);
      return;
    }
  }
}

FilterRow quantize_uniform(std::span<const double> row, int bitwidth, double clip, TieBreak) {
  FilterRow out(row.size());
  quantize_uniform_into(row, bitwidth, clip, out);
  return out;
}

FilterRow quantize_ternary(std::span<const double> row, double threshold, TernaryMask mask) {
  FilterRow out(row.size());
  quantize_ternary_into(row, threshold, mask, out);
  return out;
}

FilterRow quantize_binary(std::span<const double> row) {
  FilterRow out(row.size());
  quantize_binary_into(row, out);
  return out;
}

FilterRow quantize_dispatch(std::span<const double> row, const QuantSpec& spec) {
  FilterRow out(row.size());
  quantize_dispatch_into(row, spec, out);
  return out;
}

FilterRow ste_backward(std::span<const double> upstream_grad, std::size_t expected_d) {
  if (upstream_grad.size() != expected_d) {
    throw std::invalid_argument("ste_backward: gradient length " +
                                std::to_string(upstream_grad.size()) +
                                " does not match filter length " + std::to_string(expected_d));
  }
  return FilterRow(upstream_grad.begin(), upstream_grad.end());
}

void fake_quantize_activation(std::span<const double> x, int bits, double lo,
                              double hi, std::span<double> out) {
  if (bits < 1 || bits > 16) throw std::invalid_argument("fake_quantize_activation: bad bit count");
  if (out.size() != x.size()) throw std::invalid_argument("fake_quantize_activation: size mismatch");
  if (!(hi > lo)) {
    // degenerate range: nothing to quantize against
    std::fprintf(stderr, "warning: fake_quantize_activation: degenerate range [%g, %g], passing through\n",
                 lo, hi);
    std::copy(x.begin(), x.end(), out.begin());
    return;
  }
  const double levels = static_cast<double>((1 << bits) - 1);
  const double scale = (hi - lo) / levels;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::clamp(x[i], lo, hi);
    out[i] = lo + round_half_away((v - lo) / scale) * scale;
  }
}

void fake_quantize_activation_backward(std::span<const double> x, double lo, double hi,
                                       std::span<const double> upstream,
                                       std::span<double> out) {
  if (x.size() != upstream.size() || out.size() != x.size()) {
    throw std::invalid_argument("fake_quantize_activation_backward: size mismatch");
  }
  if (!(hi > lo)) {
    std::copy(upstream.begin(), upstream.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] >= lo && x[i] <= hi) ? upstream[i] : 0.0;
  }
}

void ActRangeTracker::update(std::span<const double> x) {
  if (x.empty()) return;
  double lo = x[0], hi = x[0];
  for (double v : x) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!initialized_) {
    lo_ = lo;
    hi_ = hi;
    initialized_ = true;
  } else {
    lo_ = decay_ * lo_ + (1.0 - decay_) * lo;
    hi_ = decay_ * hi_ + (1.0 - decay_) * hi;
  }
}

void ActRangeTracker::restore(double lo, double hi, bool initialized) {
  lo_ = lo;
  hi_ = hi;
  initialized_ = initialized;
}

}  // namespace qpareto::quant
