#include <doctest.h>

#include <cmath>
#include <tuple>

#include "qpareto/arch.hpp"

using namespace qpareto;

namespace {

arch::ArchSpec spec_of(arch::Family f, double m = 1.0, int depth = 20) {
  arch::ArchSpec s;
  s.family = f;
  s.depth = depth;
  s.width_multiplier = m;
  s.bits.first = 8;
  s.bits.last = 8;
  s.bits.conv = 4;
  s.bits.dwconv = 4;
  s.classes = 10;
  return s;
}

using Row = std::tuple<std::string, int, int, int, int>;  // id, c_out, c_in, k, stride

std::vector<Row> rows_of(const arch::ArchSpec& s) {
  std::vector<Row> rows;
  for (const auto& d : arch::plan(s)) {
    rows.emplace_back(d.id, d.c_out, d.c_in, d.kernel, d.stride);
  }
  return rows;
}

}  // namespace

TEST_CASE("golden table: ResNet20 at m=1 matches the published layer list") {
  const auto rows = rows_of(spec_of(arch::Family::ResNet, 1.0, 20));
  std::vector<Row> expected;
  expected.emplace_back("stem", 16, 3, 3, 1);
  const int widths[3] = {16, 32, 64};
  int in = 16;
  for (int s = 0; s < 3; ++s) {
    for (int b = 0; b < 3; ++b) {
      const std::string id = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      expected.emplace_back(id + ".conv1", widths[s], in, 3, stride);
      expected.emplace_back(id + ".conv2", widths[s], widths[s], 3, 1);
      in = widths[s];
    }
  }
  expected.emplace_back("fc", 10, 64, 1, 1);
  CHECK(rows == expected);
}

TEST_CASE("golden table: every ResNet depth has the right block count") {
  for (int depth : {20, 26, 32, 38, 44, 50, 56}) {
    const auto rows = rows_of(spec_of(arch::Family::ResNet, 1.0, depth));
    // stem + 2 convs per block + classifier
    CHECK(rows.size() == 1 + 2 * 3 * static_cast<std::size_t>((depth - 2) / 6) + 1);
  }
  CHECK_THROWS_AS(arch::plan(spec_of(arch::Family::ResNet, 1.0, 21)), std::invalid_argument);
  CHECK_THROWS_AS(arch::plan(spec_of(arch::Family::ResNet, 1.0, 62)), std::invalid_argument);
}

TEST_CASE("golden table: Inv-ResNet26 expands by factor 6 from the stage width") {
  const auto rows = rows_of(spec_of(arch::Family::InvResNet26));
  std::vector<Row> expected;
  expected.emplace_back("stem", 16, 3, 3, 1);
  const int widths[3] = {16, 32, 64};
  int in = 16;
  for (int s = 0; s < 3; ++s) {
    const int exp = widths[s] * 6;
    for (int b = 0; b < 4; ++b) {
      const std::string id = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      expected.emplace_back(id + ".expand", exp, in, 1, 1);
      expected.emplace_back(id + ".dw", exp, 1, 3, stride);
      expected.emplace_back(id + ".project", widths[s], exp, 1, 1);
      in = widths[s];
    }
  }
  expected.emplace_back("fc", 10, 64, 1, 1);
  CHECK(rows == expected);
}

TEST_CASE("golden table: VGG11 and its variants") {
  const auto vgg = rows_of(spec_of(arch::Family::Vgg11));
  const std::vector<Row> vgg_expected = {
      {"conv1", 64, 3, 3, 1},    {"conv2", 128, 64, 3, 1},  {"conv3", 256, 128, 3, 1},
      {"conv4", 256, 256, 3, 1}, {"conv5", 512, 256, 3, 1}, {"conv6", 512, 512, 3, 1},
      {"conv7", 512, 512, 3, 1}, {"conv8", 512, 512, 3, 1}, {"fc", 10, 512, 1, 1},
  };
  CHECK(vgg == vgg_expected);

  // variant A: exactly the second layer becomes a pointwise+depthwise pair
  const auto va = rows_of(spec_of(arch::Family::Vgg11A));
  const std::vector<Row> va_expected = {
      {"conv1", 64, 3, 3, 1},    {"conv2.pw", 128, 64, 1, 1}, {"conv2.dw", 128, 1, 3, 1},
      {"conv3", 256, 128, 3, 1}, {"conv4", 256, 256, 3, 1},   {"conv5", 512, 256, 3, 1},
      {"conv6", 512, 512, 3, 1}, {"conv7", 512, 512, 3, 1},   {"conv8", 512, 512, 3, 1},
      {"fc", 10, 512, 1, 1},
  };
  CHECK(va == va_expected);

  // variant B: layers 2-5 replaced; variant C: all layers after the first
  const auto vb = rows_of(spec_of(arch::Family::Vgg11B));
  CHECK(vb.size() == 1 + 4 * 2 + 3 + 1);
  CHECK(vb[1] == Row{"conv2.pw", 128, 64, 1, 1});
  CHECK(vb[8] == Row{"conv5.dw", 512, 1, 3, 1});
  CHECK(vb[9] == Row{"conv6", 512, 512, 3, 1});

  const auto vc = rows_of(spec_of(arch::Family::Vgg11C));
  const std::vector<Row> vc_expected = {
      {"conv1", 64, 3, 3, 1},      {"conv2.pw", 128, 64, 1, 1},  {"conv2.dw", 128, 1, 3, 1},
      {"conv3.pw", 256, 128, 1, 1}, {"conv3.dw", 256, 1, 3, 1},  {"conv4.pw", 256, 256, 1, 1},
      {"conv4.dw", 256, 1, 3, 1},  {"conv5.pw", 512, 256, 1, 1}, {"conv5.dw", 512, 1, 3, 1},
      {"conv6.pw", 512, 512, 1, 1}, {"conv6.dw", 512, 1, 3, 1},  {"conv7.pw", 512, 512, 1, 1},
      {"conv7.dw", 512, 1, 3, 1},  {"conv8.pw", 512, 512, 1, 1}, {"conv8.dw", 512, 1, 3, 1},
      {"fc", 10, 512, 1, 1},
  };
  CHECK(vc == vc_expected);
}

TEST_CASE("golden table: CIFAR-style MobileNetV2 stride rule") {
  const auto rows = rows_of(spec_of(arch::Family::MobileNetV2Cifar));
  // stem downsamples, and among bottlenecks only the fifth stage does
  CHECK(rows.front() == Row{"stem", 32, 3, 3, 2});
  int stride2_dw = 0;
  for (const auto& r : rows) {
    if (std::get<0>(r).find(".dw") != std::string::npos && std::get<4>(r) == 2) {
      ++stride2_dw;
      CHECK(std::get<0>(r) == "bneck5.block1.dw");
    }
  }
  CHECK(stride2_dw == 1);

  // first bottleneck has no expansion (t = 1); later ones expand 6x the input
  CHECK(rows[1] == Row{"bneck1.block1.dw", 32, 1, 3, 1});
  CHECK(rows[2] == Row{"bneck1.block1.project", 16, 32, 1, 1});
  CHECK(rows[3] == Row{"bneck2.block1.expand", 96, 16, 1, 1});
  // head and classifier
  CHECK(rows[rows.size() - 2] == Row{"head", 1280, 320, 1, 1});
  CHECK(rows.back() == Row{"fc", 10, 1280, 1, 1});
}

TEST_CASE("model_size formula on hand-computed layers") {
  // 16 filters, C_in 3, 3x3 at 4 bits -> 1728 bits; at 1 bit -> 432
  auto s = spec_of(arch::Family::ResNet);
  s.bits.first = 4;
  auto report = arch::model_size(s);
  CHECK(report.per_layer.front().layer_id == "stem");
  CHECK(report.per_layer.front().size_bits == 1728);
  s.bits.first = 1;
  CHECK(arch::model_size(s).per_layer.front().size_bits == 432);

  // depth-wise layer, 64 filters, 3x3, 4 bits -> 64*4*1*9 = 2304
  auto c = spec_of(arch::Family::Vgg11C, 0.125);
  const auto creport = arch::model_size(c);
  bool found = false;
  for (const auto& row : creport.per_layer) {
    if (row.layer_id == "conv8.dw") {
      CHECK(row.filters == 64);
      CHECK(row.c_in == 1);
      CHECK(row.size_bits == 2304);
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("model_size totals: ResNet20 golden sum, linearity in bits, fp = 32") {
  auto s = spec_of(arch::Family::ResNet);
  // hand sum: stem 432 weights, interior 267264, classifier 640
  const auto rep = arch::model_size(s);
  CHECK(rep.total_bits == 8 * 432 + 4 * 267264 + 8 * 640);

  std::int64_t total = 0;
  for (const auto& row : rep.per_layer) total += row.size_bits;
  CHECK(total == rep.total_bits);

  auto s2 = s;
  s2.bits.conv = 2;
  const auto rep2 = arch::model_size(s2);
  CHECK(rep2.total_bits == 8 * 432 + 2 * 267264 + 8 * 640);  // halving b halves the term

  auto sf = s;
  sf.bits.conv = 0;  // full precision counts 32 bits per weight
  CHECK(arch::model_size(sf).total_bits == 8 * 432 + 32 * 267264 + 8 * 640);

  auto missing = s;
  missing.bits.conv.reset();
  CHECK_THROWS_WITH_AS(arch::model_size(missing), doctest::Contains("missing bitwidth"),
                       std::invalid_argument);
}

TEST_CASE("channel rounding scales every interior width, min 1") {
  auto s = spec_of(arch::Family::ResNet, 0.01);
  const auto rows = rows_of(s);
  for (const auto& r : rows) CHECK(std::get<1>(r) >= 1);

  auto s2 = spec_of(arch::Family::ResNet, 1.5);
  const auto rep = arch::model_size(s2);
  CHECK(rep.per_layer.front().filters == 24);  // 16 * 1.5
}

TEST_CASE("ImageNet-style configs pin the stem and classifier widths") {
  auto s = spec_of(arch::Family::MobileNetV2Cifar, 0.5);
  s.scale_first_last = false;
  const auto rows = rows_of(s);
  CHECK(std::get<1>(rows.front()) == 32);       // stem keeps 32
  CHECK(std::get<1>(rows[rows.size() - 2]) == 1280);  // head keeps 1280
  CHECK(std::get<2>(rows.back()) == 1280);      // classifier input unchanged

  auto r = spec_of(arch::Family::ResNet, 0.5);
  r.scale_first_last = false;
  const auto rrows = rows_of(r);
  CHECK(std::get<1>(rrows.front()) == 16);
  CHECK(std::get<2>(rrows.back()) == 64);
}

TEST_CASE("size is monotone in m and grows roughly quadratically") {
  for (auto family : {arch::Family::ResNet, arch::Family::Vgg11}) {
    auto s = spec_of(family);
    s.bits.conv = 1;
    s.bits.dwconv = 1;
    std::int64_t prev = 0;
    for (double m : {0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0}) {
      s.width_multiplier = m;
      const auto total = arch::model_size(s).total_bits;
      CHECK(total >= prev);
      prev = total;
    }
    for (double m : {0.5, 1.0, 2.0}) {
      s.width_multiplier = m;
      const double at_m = static_cast<double>(arch::model_size(s).total_bits);
      s.width_multiplier = 2.0 * m;
      const double at_2m = static_cast<double>(arch::model_size(s).total_bits);
      CHECK(at_2m / at_m > 3.3);
      CHECK(at_2m / at_m < 4.3);
    }
  }
}

TEST_CASE("align_width: matching a 1-bit map to the 4-bit size doubles the width") {
  for (auto family : {arch::Family::ResNet, arch::Family::Vgg11}) {
    auto four = spec_of(family, 1.0);
    const std::int64_t target = arch::model_size(four).total_bits;

    auto one = four;
    one.bits.conv = 1;
    one.bits.dwconv = 1;
    const double m = arch::align_width(one, target, 0.01);
    CHECK(m >= 1.9);
    CHECK(m <= 2.1);
    one.width_multiplier = m;
    const double achieved = static_cast<double>(arch::model_size(one).total_bits);
    CHECK(std::abs(achieved - target) / target <= 0.01);

    // exhaustive-scan oracle: no scanned multiplier does better
    std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
    for (int i = 0; i <= 4000; ++i) {
      one.width_multiplier = 1.5 + i * (2.5 - 1.5) / 4000.0;
      const std::int64_t sz = arch::model_size(one).total_bits;
      if (static_cast<double>(sz) > target * 1.01) continue;
      best_gap = std::min<std::int64_t>(best_gap, std::llabs(sz - target));
    }
    CHECK(std::llabs(static_cast<std::int64_t>(achieved) - target) <= best_gap);
  }
}

TEST_CASE("align_width: fixed point and unreachable targets") {
  auto s = spec_of(arch::Family::ResNet, 1.0);
  const std::int64_t target = arch::model_size(s).total_bits;
  const double m = arch::align_width(s, target, 0.01);
  CHECK(m == doctest::Approx(1.0).epsilon(1e-9));
  s.width_multiplier = m;
  CHECK(arch::model_size(s).total_bits == target);

  try {
    arch::align_width(s, 10, 0.01);  // ten bits is below the 1-channel floor
    FAIL("expected AlignError");
  } catch (const arch::AlignError& e) {
    CHECK(e.nearest > 10);
    CHECK(std::string(e.what()).find("nearest") != std::string::npos);
  }
}

TEST_CASE("arch spec json round trip") {
  auto s = spec_of(arch::Family::Vgg11C, 0.37);
  s.act_bits = 4;
  s.bits.dwconv = 0;
  s.scale_first_last = false;
  const auto parsed = arch::ArchSpec::from_json(s.to_json());
  CHECK(parsed.family == s.family);
  CHECK(parsed.width_multiplier == s.width_multiplier);
  CHECK(parsed.bits == s.bits);
  CHECK(parsed.act_bits == s.act_bits);
  CHECK(parsed.scale_first_last == s.scale_first_last);
  CHECK(parsed.id() == s.id());
}

TEST_CASE("rounding to zero channels is impossible but tiny m still errors sanely") {
  // channel floor of 1 keeps everything positive even at extreme m
  auto s = spec_of(arch::Family::Vgg11, 1e-6);
  const auto rows = rows_of(s);
  for (const auto& r : rows) CHECK(std::get<1>(r) >= 1);
}
