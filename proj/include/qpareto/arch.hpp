#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qpareto/calib.hpp"
#include "qpareto/layers.hpp"

namespace qpareto::arch {

enum class Family {
  ResNet,           // basic blocks, depth in {20, 26, ..., 56}
  InvResNet26,      // basic blocks replaced by inverted residual blocks
  Vgg11,
  Vgg11A,           // one conv replaced by a pointwise+depthwise pair
  Vgg11B,           // four convs replaced
  Vgg11C,           // every conv after the first replaced
  MobileNetV2Cifar, // stride schedule adapted so the image is downsampled twice
};

std::string family_name(Family f);
Family family_from_name(const std::string& name);  // accepts "resnet20" etc.

/// Per-layer-class bitwidths. nullopt = unassigned (an error where a value is
/// required); 0 = keep full precision (counted as 32 bits in the size
/// formula); 1..8 = quantize.
struct BitMap {
  std::optional<int> first = 8;
  std::optional<int> last = 8;
  std::optional<int> conv;
  std::optional<int> dwconv;

  bool operator==(const BitMap&) const = default;
};

struct ArchSpec {
  Family family = Family::ResNet;
  int depth = 20;  // ResNet only
  double width_multiplier = 1.0;
  BitMap bits;
  int in_channels = 3;
  int in_hw = 32;
  int classes = 10;
  bool scale_first_last = true;  // ImageNet-style configs pin the stem and classifier widths
  std::optional<int> act_bits;
  double ternary_threshold = 0.7;
  quant::TernaryMask ternary_mask = quant::TernaryMask::Magnitude;

  std::string id() const;
  std::string to_json() const;
  static ArchSpec from_json(const std::string& text);
};

enum class LayerClass { First, Conv, DwConv, Last };

/// One quantizable weight layer in build order.
struct ConvDef {
  std::string id;
  LayerClass cls = LayerClass::Conv;
  int c_out = 0;
  int c_in = 0;   // channels seen by one filter (C_in/groups; 1 for depth-wise)
  int kernel = 1;
  int stride = 1;
  int groups = 1;
  bool dense = false;  // classifier row
  std::optional<int> bits;
};

struct SizeRow {
  std::string layer_id;
  int filters = 0;
  int bits = 0;  // 32 for full precision
  int c_in = 0;
  int k_w = 0, k_h = 0;
  std::int64_t size_bits = 0;
};

struct SizeReport {
  std::vector<SizeRow> per_layer;
  std::int64_t total_bits = 0;
};

/// Flattened per-filter-class conv/dense table for a spec; the golden-table
/// tests pin this against the published layer lists at m = 1.
std::vector<ConvDef> plan(const ArchSpec& spec);

/// C_size = sum over filters of b(i) * C_in(i) * K_w(i) * K_h(i).
SizeReport model_size(const ArchSpec& spec);

/// Instantiates the trainable network with freshly initialized weights.
/// The calibration table supplies clip ratios for every uniform bitwidth in
/// the spec.
nn::Model build(const ArchSpec& spec, const calib::CalibTable& calib, std::uint64_t init_seed);

struct AlignError : std::runtime_error {
  AlignError(const std::string& msg, std::int64_t nearest_bits)
      : std::runtime_error(msg), nearest(nearest_bits) {}
  std::int64_t nearest;
};

/// Finds the width multiplier whose model size best matches `target_bits`,
/// subject to size <= target * (1 + tolerance). Bisection over the monotone
/// size function plus a scan of the rounding plateaus around the crossing.
double align_width(const ArchSpec& proto, std::int64_t target_bits, double tolerance = 0.01);

}  // namespace qpareto::arch
