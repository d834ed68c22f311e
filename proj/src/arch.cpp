#include "qpareto/arch.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "qpareto/train.hpp"

namespace qpareto::arch {

namespace {

int scaled(int base, double m) {
  return std::max(1, static_cast<int>(std::llround(m * base)));
}

std::string bits_token(const std::optional<int>& b) {
  if (!b) return "x";
  if (*b == 0) return "fp";
  return std::to_string(*b);
}

// Internal construction plan shared by plan() and build().
struct Piece {
  enum Kind { Conv, MaxPool, Residual, InvResidual, GlobalAvgPool, Dense } kind;
  std::string id;
  LayerClass cls = LayerClass::Conv;
  int c_in = 0, c_out = 0, kernel = 3, stride = 1;
  int expanded = 0;  // InvResidual only
};

struct Blueprint {
  std::vector<Piece> pieces;
  int feature_channels = 0;  // classifier input width
};

void check_common(const ArchSpec& spec) {
  if (!(spec.width_multiplier > 0.0)) {
    throw std::invalid_argument("ArchSpec: width multiplier must be positive");
  }
  if (spec.classes < 2) throw std::invalid_argument("ArchSpec: need at least 2 classes");
  if (spec.in_channels < 1 || spec.in_hw < 8) throw std::invalid_argument("ArchSpec: bad input shape");
}

Blueprint blueprint_resnet(const ArchSpec& spec, bool inverted) {
  const double m = spec.width_multiplier;
  Blueprint bp;
  int depth = inverted ? 26 : spec.depth;
  if (!inverted) {
    if (depth < 20 || depth > 56 || (depth - 2) % 6 != 0) {
      throw std::invalid_argument("ResNet depth must be one of 20, 26, ..., 56");
    }
  }
  const int blocks_per_stage = inverted ? 4 : (depth - 2) / 6;
  const int stage_base[3] = {16, 32, 64};

  const int stem_out = spec.scale_first_last ? scaled(16, m) : 16;
  bp.pieces.push_back({Piece::Conv, "stem", LayerClass::First, spec.in_channels, stem_out, 3, 1, 0});

  int in_ch = stem_out;
  for (int s = 0; s < 3; ++s) {
    const bool last_stage = s == 2;
    const int base = stage_base[s];
    const int width = (last_stage && !spec.scale_first_last) ? base : scaled(base, m);
    for (int b = 0; b < blocks_per_stage; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      Piece p;
      p.kind = inverted ? Piece::InvResidual : Piece::Residual;
      p.id = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      p.c_in = in_ch;
      p.c_out = width;
      p.stride = stride;
      if (inverted) p.expanded = 6 * width;  // Inv-ResNet expands from the stage width
      bp.pieces.push_back(p);
      in_ch = width;
    }
  }
  bp.pieces.push_back({Piece::GlobalAvgPool, "gap", LayerClass::Conv, in_ch, in_ch, 0, 1, 0});
  bp.pieces.push_back({Piece::Dense, "fc", LayerClass::Last, in_ch, spec.classes, 1, 1, 0});
  bp.feature_channels = in_ch;
  return bp;
}

Blueprint blueprint_vgg(const ArchSpec& spec) {
  const double m = spec.width_multiplier;
  // conv widths and pooling schedule of the eleven-layer configuration
  const int widths[8] = {64, 128, 256, 256, 512, 512, 512, 512};
  const bool pool_after[8] = {true, true, false, true, false, true, false, true};
  int replaced_from = 9, replaced_to = 8;  // 1-based layer indices replaced by pw+dw pairs
  switch (spec.family) {
    case Family::Vgg11: break;
    case Family::Vgg11A: replaced_from = 2; replaced_to = 2; break;
    case Family::Vgg11B: replaced_from = 2; replaced_to = 5; break;
    case Family::Vgg11C: replaced_from = 2; replaced_to = 8; break;
    default: throw std::logic_error("blueprint_vgg: not a VGG family");
  }

  Blueprint bp;
  int in_ch = spec.in_channels;
  for (int i = 0; i < 8; ++i) {
    const int layer_no = i + 1;
    const bool is_first = layer_no == 1;
    const bool pin = !spec.scale_first_last && (is_first || layer_no == 8);
    const int width = pin ? widths[i] : scaled(widths[i], m);
    const std::string id = "conv" + std::to_string(layer_no);
    if (layer_no >= replaced_from && layer_no <= replaced_to) {
      bp.pieces.push_back({Piece::Conv, id + ".pw", LayerClass::Conv, in_ch, width, 1, 1, 0});
      bp.pieces.push_back({Piece::Conv, id + ".dw", LayerClass::DwConv, width, width, 3, 1, 0});
    } else {
      bp.pieces.push_back(
          {Piece::Conv, id, is_first ? LayerClass::First : LayerClass::Conv, in_ch, width, 3, 1, 0});
    }
    in_ch = width;
    if (pool_after[i]) {
      bp.pieces.push_back({Piece::MaxPool, "pool" + std::to_string(layer_no), LayerClass::Conv,
                           in_ch, in_ch, 2, 2, 0});
    }
  }
  bp.pieces.push_back({Piece::GlobalAvgPool, "gap", LayerClass::Conv, in_ch, in_ch, 0, 1, 0});
  bp.pieces.push_back({Piece::Dense, "fc", LayerClass::Last, in_ch, spec.classes, 1, 1, 0});
  bp.feature_channels = in_ch;
  return bp;
}

Blueprint blueprint_mobilenet(const ArchSpec& spec) {
  const double m = spec.width_multiplier;
  Blueprint bp;
  const int stem_out = spec.scale_first_last ? scaled(32, m) : 32;
  bp.pieces.push_back({Piece::Conv, "stem", LayerClass::First, spec.in_channels, stem_out, 3, 2, 0});

  // (expansion t, base width, repeats); every stride forced to 1 except the
  // fifth bottleneck stage, so the image is downsampled twice in total
  struct Row { int t, c, n, stride; };
  const Row rows[7] = {{1, 16, 1, 1},  {6, 24, 2, 1}, {6, 32, 3, 1}, {6, 64, 4, 1},
                       {6, 96, 3, 2},  {6, 160, 3, 1}, {6, 320, 1, 1}};
  int in_ch = stem_out;
  for (int r = 0; r < 7; ++r) {
    const int width = scaled(rows[r].c, m);
    for (int b = 0; b < rows[r].n; ++b) {
      Piece p;
      p.kind = Piece::InvResidual;
      p.id = "bneck" + std::to_string(r + 1) + ".block" + std::to_string(b + 1);
      p.c_in = in_ch;
      p.c_out = width;
      p.stride = (b == 0) ? rows[r].stride : 1;
      p.expanded = in_ch * rows[r].t;  // MobileNetV2 expands from the block input
      bp.pieces.push_back(p);
      in_ch = width;
    }
  }
  const int head_out = spec.scale_first_last ? scaled(1280, m) : 1280;
  bp.pieces.push_back({Piece::Conv, "head", LayerClass::Conv, in_ch, head_out, 1, 1, 0});
  bp.pieces.push_back({Piece::GlobalAvgPool, "gap", LayerClass::Conv, head_out, head_out, 0, 1, 0});
  bp.pieces.push_back({Piece::Dense, "fc", LayerClass::Last, head_out, spec.classes, 1, 1, 0});
  bp.feature_channels = head_out;
  return bp;
}

Blueprint make_blueprint(const ArchSpec& spec) {
  check_common(spec);
  switch (spec.family) {
    case Family::ResNet: return blueprint_resnet(spec, false);
    case Family::InvResNet26: return blueprint_resnet(spec, true);
    case Family::Vgg11:
    case Family::Vgg11A:
    case Family::Vgg11B:
    case Family::Vgg11C: return blueprint_vgg(spec);
    case Family::MobileNetV2Cifar: return blueprint_mobilenet(spec);
  }
  throw std::logic_error("make_blueprint: unknown family");
}

std::optional<int> class_bits(const BitMap& bits, LayerClass cls) {
  switch (cls) {
    case LayerClass::First: return bits.first;
    case LayerClass::Last: return bits.last;
    case LayerClass::Conv: return bits.conv;
    case LayerClass::DwConv: return bits.dwconv;
  }
  return std::nullopt;
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::ResNet: return "resnet";
    case Family::InvResNet26: return "inv_resnet26";
    case Family::Vgg11: return "vgg11";
    case Family::Vgg11A: return "vgg11_a";
    case Family::Vgg11B: return "vgg11_b";
    case Family::Vgg11C: return "vgg11_c";
    case Family::MobileNetV2Cifar: return "mobilenet_v2";
  }
  return "unknown";
}

Family family_from_name(const std::string& name) {
  if (name.rfind("resnet", 0) == 0 && name.size() > 6) return Family::ResNet;
  if (name == "resnet") return Family::ResNet;
  if (name == "inv_resnet26") return Family::InvResNet26;
  if (name == "vgg11") return Family::Vgg11;
  if (name == "vgg11_a") return Family::Vgg11A;
  if (name == "vgg11_b") return Family::Vgg11B;
  if (name == "vgg11_c") return Family::Vgg11C;
  if (name == "mobilenet_v2") return Family::MobileNetV2Cifar;
  throw std::invalid_argument("unknown family: " + name);
}

std::string ArchSpec::id() const {
  std::ostringstream os;
  os << family_name(family);
  if (family == Family::ResNet) os << depth;
  os << "_m";
  os.setf(std::ios::fixed);
  os.precision(4);
  os << width_multiplier;
  os << "_f" << bits_token(bits.first) << "l" << bits_token(bits.last) << "c"
     << bits_token(bits.conv) << "d" << bits_token(bits.dwconv);
  return os.str();
}

std::vector<ConvDef> plan(const ArchSpec& spec) {
  const Blueprint bp = make_blueprint(spec);
  std::vector<ConvDef> defs;
  auto push_conv = [&](const std::string& id, LayerClass cls, int c_out, int c_in_per_filter,
                       int kernel, int stride, int groups, bool dense) {
    ConvDef d;
    d.id = id;
    d.cls = cls;
    d.c_out = c_out;
    d.c_in = c_in_per_filter;
    d.kernel = kernel;
    d.stride = stride;
    d.groups = groups;
    d.dense = dense;
    d.bits = class_bits(spec.bits, cls);
    defs.push_back(d);
  };

  for (const Piece& p : bp.pieces) {
    switch (p.kind) {
      case Piece::Conv:
        push_conv(p.id, p.cls, p.c_out, p.cls == LayerClass::DwConv ? 1 : p.c_in, p.kernel,
                  p.stride, p.cls == LayerClass::DwConv ? p.c_in : 1, false);
        break;
      case Piece::Residual:
        push_conv(p.id + ".conv1", LayerClass::Conv, p.c_out, p.c_in, 3, p.stride, 1, false);
        push_conv(p.id + ".conv2", LayerClass::Conv, p.c_out, p.c_out, 3, 1, 1, false);
        break;
      case Piece::InvResidual:
        if (p.expanded != p.c_in) {
          push_conv(p.id + ".expand", LayerClass::Conv, p.expanded, p.c_in, 1, 1, 1, false);
        }
        push_conv(p.id + ".dw", LayerClass::DwConv, p.expanded, 1, 3, p.stride, p.expanded, false);
        push_conv(p.id + ".project", LayerClass::Conv, p.c_out, p.expanded, 1, 1, 1, false);
        break;
      case Piece::Dense:
        push_conv(p.id, LayerClass::Last, p.c_out, p.c_in, 1, 1, 1, true);
        break;
      case Piece::MaxPool:
      case Piece::GlobalAvgPool:
        break;
    }
  }
  return defs;
}

SizeReport model_size(const ArchSpec& spec) {
  SizeReport report;
  for (const ConvDef& d : plan(spec)) {
    if (!d.bits) {
      throw std::invalid_argument("model_size: missing bitwidth assignment for layer '" + d.id + "'");
    }
    const int b = (*d.bits == 0) ? 32 : *d.bits;
    SizeRow row;
    row.layer_id = d.id;
    row.filters = d.c_out;
    row.bits = b;
    row.c_in = d.c_in;
    row.k_w = d.kernel;
    row.k_h = d.kernel;
    row.size_bits = static_cast<std::int64_t>(d.c_out) * b * d.c_in * d.kernel * d.kernel;
    report.total_bits += row.size_bits;
    report.per_layer.push_back(row);
  }
  return report;
}

nn::Model build(const ArchSpec& spec, const calib::CalibTable& calib, std::uint64_t init_seed) {
  const Blueprint bp = make_blueprint(spec);

  auto qspec_for = [&](LayerClass cls) {
    quant::QuantSpec q;
    const std::optional<int> b = class_bits(spec.bits, cls);
    if (!b) {
      throw std::invalid_argument("build: missing bitwidth assignment for layer class");
    }
    if (*b == 0) return q;  // full precision
    q.bitwidth = *b;
    q.ternary_threshold = spec.ternary_threshold;
    q.ternary_mask = spec.ternary_mask;
    if (*b > 2) q.clip_ratio_c = calib.clip_ratio(*b);
    return q;
  };

  nn::Model model;
  auto maybe_act_quant = [&] {
    if (spec.act_bits) model.add(std::make_unique<nn::ActQuant>(*spec.act_bits));
  };

  for (const Piece& p : bp.pieces) {
    switch (p.kind) {
      case Piece::Conv: {
        const bool dw = p.cls == LayerClass::DwConv;
        nn::Conv2dOpts opts;
        opts.in_channels = p.c_in;
        opts.out_channels = p.c_out;
        opts.kernel = p.kernel;
        opts.stride = p.stride;
        opts.groups = dw ? p.c_in : 1;
        opts.qspec = qspec_for(p.cls);
        auto conv = std::make_unique<nn::Conv2d>(opts);
        conv->set_name(p.id);
        model.add(std::move(conv));
        auto bn = std::make_unique<nn::BatchNorm2d>(p.c_out);
        bn->set_name(p.id + ".bn");
        model.add(std::move(bn));
        model.add(std::make_unique<nn::ReLU>());
        maybe_act_quant();
        break;
      }
      case Piece::Residual: {
        auto block = std::make_unique<nn::ResidualBlock>(p.c_in, p.c_out, p.stride,
                                                         qspec_for(LayerClass::Conv));
        block->set_name(p.id);
        model.add(std::move(block));
        maybe_act_quant();
        break;
      }
      case Piece::InvResidual: {
        auto block = std::make_unique<nn::InvertedResidualBlock>(
            p.c_in, p.c_out, p.expanded, p.stride, qspec_for(LayerClass::Conv),
            qspec_for(LayerClass::DwConv));
        block->set_name(p.id);
        model.add(std::move(block));
        maybe_act_quant();
        break;
      }
      case Piece::MaxPool: {
        auto pool = std::make_unique<nn::MaxPool2d>(2, 2);
        pool->set_name(p.id);
        model.add(std::move(pool));
        break;
      }
      case Piece::GlobalAvgPool:
        model.add(std::make_unique<nn::GlobalAvgPool>());
        break;
      case Piece::Dense: {
        auto fc = std::make_unique<nn::Dense>(p.c_in, p.c_out, qspec_for(LayerClass::Last));
        fc->set_name(p.id);
        model.add(std::move(fc));
        break;
      }
    }
  }
  nn::init_params(model, init_seed);
  return model;
}

double align_width(const ArchSpec& proto, std::int64_t target_bits, double tolerance) {
  if (target_bits <= 0) throw std::invalid_argument("align_width: target size must be positive");
  auto size_at = [&](double m) {
    ArchSpec s = proto;
    s.width_multiplier = m;
    return model_size(s).total_bits;
  };
  const double cap = target_bits * (1.0 + tolerance);

  const double m_floor = 1e-9;
  const std::int64_t min_size = size_at(m_floor);
  if (static_cast<double>(min_size) > cap) {
    throw AlignError("align_width: target " + std::to_string(target_bits) +
                         " bits unreachable; nearest achievable size is " +
                         std::to_string(min_size) + " bits",
                     min_size);
  }

  // bracket the crossing of the monotone step function
  double lo = m_floor, hi = 1.0;
  while (size_at(hi) < target_bits) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e5) break;
  }
  if (size_at(lo) >= target_bits) lo = m_floor;
  for (int it = 0; it < 200 && (hi - lo) > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (size_at(mid) < target_bits) {
      lo = mid;
    } else {
      hi = mid;
    }
  }

  // scan the rounding plateaus bracketing the crossing
  std::set<double> edges;
  std::set<int> base_widths;
  {
    ArchSpec unit = proto;
    unit.width_multiplier = 1.0;
    for (const ConvDef& d : plan(unit)) base_widths.insert(d.c_out);
  }
  const double window_lo = std::max(m_floor, lo * 0.75);
  const double window_hi = hi * 1.25;
  for (int c : base_widths) {
    if (c <= 0) continue;
    const long k_lo = std::max(1L, static_cast<long>(std::floor(window_lo * c - 0.5)));
    const long k_hi = static_cast<long>(std::ceil(window_hi * c + 0.5));
    for (long k = k_lo; k <= k_hi; ++k) {
      const double edge = (static_cast<double>(k) - 0.5) / c;
      if (edge >= window_lo && edge <= window_hi) edges.insert(edge);
    }
  }
  edges.insert(window_lo);
  edges.insert(window_hi);

  std::vector<double> candidates;
  double prev = -1.0;
  for (double e : edges) {
    if (prev > 0.0) candidates.push_back(0.5 * (prev + e));
    prev = e;
  }
  candidates.push_back(window_lo);
  candidates.push_back(window_hi);
  candidates.push_back(m_floor);  // bottom plateau, for tiny targets

  double best_m = -1.0;
  std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
  std::int64_t nearest_any = std::numeric_limits<std::int64_t>::max();
  std::int64_t nearest_size = 0;
  for (double m : candidates) {
    const std::int64_t sz = size_at(m);
    const std::int64_t gap = std::llabs(sz - target_bits);
    if (gap < nearest_any) {
      nearest_any = gap;
      nearest_size = sz;
    }
    if (static_cast<double>(sz) > cap) continue;
    if (gap < best_gap || (gap == best_gap && m < best_m)) {
      best_gap = gap;
      best_m = m;
    }
  }
  if (best_m < 0.0) {
    throw AlignError("align_width: no width multiplier lands within tolerance of " +
                         std::to_string(target_bits) + " bits; nearest achievable is " +
                         std::to_string(nearest_size) + " bits",
                     nearest_size);
  }
  return best_m;
}

std::string ArchSpec::to_json() const {
  nlohmann::json j;
  j["family"] = family_name(family);
  if (family == Family::ResNet) j["depth"] = depth;
  j["width_multiplier"] = width_multiplier;
  auto bit_field = [](const std::optional<int>& b) {
    return b ? nlohmann::json(*b) : nlohmann::json(nullptr);
  };
  j["bits"] = {{"first", bit_field(bits.first)},
               {"last", bit_field(bits.last)},
               {"conv", bit_field(bits.conv)},
               {"dwconv", bit_field(bits.dwconv)}};
  j["in_channels"] = in_channels;
  j["in_hw"] = in_hw;
  j["classes"] = classes;
  j["scale_first_last"] = scale_first_last;
  j["act_bits"] = act_bits ? nlohmann::json(*act_bits) : nlohmann::json(nullptr);
  j["ternary_threshold"] = ternary_threshold;
  j["ternary_mask"] = ternary_mask == quant::TernaryMask::Magnitude ? "magnitude" : "literal_signed";
  return j.dump();
}

ArchSpec ArchSpec::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ArchSpec s;
  const std::string fam = j.at("family").get<std::string>();
  s.family = family_from_name(fam);
  if (s.family == Family::ResNet) {
    if (j.contains("depth")) {
      s.depth = j.at("depth").get<int>();
    } else if (fam.size() > 6) {
      s.depth = std::stoi(fam.substr(6));
    }
  }
  s.width_multiplier = j.at("width_multiplier").get<double>();
  auto read_bits = [&](const char* key) -> std::optional<int> {
    const auto& v = j.at("bits").at(key);
    if (v.is_null()) return std::nullopt;
    return v.get<int>();
  };
  s.bits.first = read_bits("first");
  s.bits.last = read_bits("last");
  s.bits.conv = read_bits("conv");
  s.bits.dwconv = read_bits("dwconv");
  s.in_channels = j.value("in_channels", 3);
  s.in_hw = j.value("in_hw", 32);
  s.classes = j.value("classes", 10);
  s.scale_first_last = j.value("scale_first_last", true);
  if (j.contains("act_bits") && !j.at("act_bits").is_null()) {
    s.act_bits = j.at("act_bits").get<int>();
  }
  s.ternary_threshold = j.value("ternary_threshold", 0.7);
  if (j.value("ternary_mask", "magnitude") == std::string("literal_signed")) {
    s.ternary_mask = quant::TernaryMask::LiteralSigned;
  }
  return s;
}

}  // namespace qpareto::arch
