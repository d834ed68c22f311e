#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace qpareto::quant {

/// One flattened output-filter row W_{i,:}. d = C_in * K_w * K_h elements
/// for an all-to-all convolution, K_w * K_h for a depth-wise one.
using FilterRow = std::vector<double>;

enum class TieBreak { HalfAwayFromZero };

enum class TernaryMask {
  Magnitude,      // zero when |w_j| < threshold * mean|W|
  LiteralSigned,  // zero when w_j < threshold * mean|W| (kept for comparison runs)
};

/// Per-layer quantization recipe. bitwidth == nullopt keeps the row in
/// full precision; 1 -> binary, 2 -> ternary, >= 3 -> clipped uniform grid
/// with the clip derived from mean|W| / clip_ratio_c.
struct QuantSpec {
  std::optional<int> bitwidth;
  double clip_ratio_c = 0.0;
  double ternary_threshold = 0.7;
  TieBreak tie_break = TieBreak::HalfAwayFromZero;
  TernaryMask ternary_mask = TernaryMask::Magnitude;

  void validate() const;  // throws std::invalid_argument on a bad recipe
};

/// sign with sign(0) := +1
inline double sign_pm(double v) { return v < 0.0 ? -1.0 : 1.0; }

/// round-to-nearest with halves away from zero
inline double round_half_away(double v) {
  return std::copysign(std::floor(std::abs(v) + 0.5), v);
}

double mean_abs(std::span<const double> row);

// In-place kernels used by the conv/dense layers on their weight buffers.
// `out` may alias `row`.
void quantize_uniform_into(std::span<const double> row, int bitwidth, double clip,
                           std::span<double> out);
void quantize_ternary_into(std::span<const double> row, double threshold,
                           TernaryMask mask, std::span<double> out);
void quantize_binary_into(std::span<const double> row, std::span<double> out);
void quantize_dispatch_into(std::span<const double> row, const QuantSpec& spec,
                            std::span<double> out);

FilterRow quantize_uniform(std::span<const double> row, int bitwidth, double clip,
                           TieBreak tie = TieBreak::HalfAwayFromZero);
FilterRow quantize_ternary(std::span<const double> row, double threshold = 0.7,
                           TernaryMask mask = TernaryMask::Magnitude);
FilterRow quantize_binary(std::span<const double> row);
FilterRow quantize_dispatch(std::span<const double> row, const QuantSpec& spec);

/// Straight-through estimator backward: identity Jacobian. `expected_d` is
/// the row length the gradient must match.
FilterRow ste_backward(std::span<const double> upstream_grad, std::size_t expected_d);

/// Per-tensor affine fake quantization onto 2^bits levels spanning [lo, hi],
/// dequantized back to real arithmetic. Degenerate ranges pass through.
void fake_quantize_activation(std::span<const double> x, int bits, double lo,
                              double hi, std::span<double> out);

/// Clipped-STE backward for the activation quantizer: gradient passes
/// unchanged inside [lo, hi] and is zeroed outside.
void fake_quantize_activation_backward(std::span<const double> x, double lo, double hi,
                                       std::span<const double> upstream,
                                       std::span<double> out);

/// Exponential-moving-average min/max tracker for one activation tensor.
/// Single writer per layer per training step; frozen at evaluation.
class ActRangeTracker {
 public:
  explicit ActRangeTracker(double decay = 0.99) : decay_(decay) {}

  void update(std::span<const double> x);
  bool initialized() const { return initialized_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  void restore(double lo, double hi, bool initialized);

 private:
  double decay_;
  double lo_ = 0.0;
  double hi_ = 0.0;
  bool initialized_ = false;
};

}  // namespace qpareto::quant
