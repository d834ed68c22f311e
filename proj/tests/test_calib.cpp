#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "qpareto/calib.hpp"

using namespace qpareto;

namespace {

std::vector<double> default_grid(double sigma, std::size_t points = 400) {
  return calib::log_spaced_grid(0.25 * sigma, 8.0 * sigma, points);
}

}  // namespace

TEST_CASE("gaussian sampling is deterministic and has the half-normal mean") {
  const auto a = calib::draw_gaussian(100000, 1.0, 9);
  const auto b = calib::draw_gaussian(100000, 1.0, 9);
  CHECK(a == b);

  double mean_abs = 0.0;
  for (double v : a) mean_abs += std::abs(v);
  mean_abs /= a.size();
  const double expected = std::sqrt(2.0 / std::numbers::pi);  // 0.7979...
  CHECK(std::abs(mean_abs - expected) / expected < 0.01);
}

TEST_CASE("clip search rejects coarse grids and tiny sample counts") {
  const auto grid = calib::log_spaced_grid(0.5, 6.0, 49);
  CHECK_THROWS_WITH_AS(calib::simulate_clip_search(4, 1.0, 100000, grid, 1),
                       doctest::Contains("grid too coarse"), std::invalid_argument);
  const auto ok_grid = default_grid(1.0);
  CHECK_THROWS_AS(calib::simulate_clip_search(4, 1.0, 99, ok_grid, 1), std::invalid_argument);
}

TEST_CASE("clip search is deterministic given the seed") {
  const auto grid = default_grid(1.0);
  const auto r1 = calib::simulate_clip_search(4, 1.0, 100000, grid, 42);
  const auto r2 = calib::simulate_clip_search(4, 1.0, 100000, grid, 42);
  CHECK(r1.a_star == r2.a_star);
  CHECK(r1.c == r2.c);
  CHECK(r1.mse == r2.mse);
}

TEST_CASE("objective at a_star is a local minimum on the grid") {
  const auto grid = default_grid(1.0);
  const auto samples = calib::draw_gaussian(200000, 1.0, 11);
  for (int b : {3, 5, 8}) {
    const auto res = calib::clip_search_on_samples(b, samples, grid);
    REQUIRE(res.grid_index > 0);
    REQUIRE(res.grid_index + 1 < grid.size());
    const double left = calib::quantization_mse(samples, b, grid[res.grid_index - 1]);
    const double right = calib::quantization_mse(samples, b, grid[res.grid_index + 1]);
    CHECK(res.mse <= left);
    CHECK(res.mse <= right);
  }
}

TEST_CASE("8-bit optimum clips far in the tail and matches a finer grid") {
  const auto samples = calib::draw_gaussian(200000, 1.0, 3);
  const auto coarse = default_grid(1.0, 400);
  const auto fine = default_grid(1.0, 4000);
  const auto rc = calib::clip_search_on_samples(8, samples, coarse);
  // independent brute-force oracle: a plain argmin over the finer grid,
  // written against quantization_mse directly
  double best_a = 0.0, best_mse = 1e300;
  for (double a : fine) {
    const double mse = calib::quantization_mse(samples, 8, a);
    if (mse < best_mse) {
      best_mse = mse;
      best_a = a;
    }
  }
  CHECK(rc.a_star >= 3.0);
  CHECK(rc.a_star <= 5.0);
  const double coarse_step = coarse[rc.grid_index + 1] / coarse[rc.grid_index];
  CHECK(std::abs(std::log(best_a / rc.a_star)) <= std::log(coarse_step) * 1.0001);
}

TEST_CASE("c is invariant to sigma across independent draws") {
  const auto g1 = default_grid(1.0);
  const auto g2 = default_grid(2.0);
  const auto r1 = calib::simulate_clip_search(3, 1.0, 400000, g1, 21);
  const auto r2 = calib::simulate_clip_search(3, 2.0, 400000, g2, 22);
  CHECK(std::abs(r1.c - r2.c) / r1.c < 0.01);
}

TEST_CASE("quadrupling the sample count shrinks the seed spread of c") {
  auto spread = [&](std::size_t n) {
    double lo = 1e300, hi = -1e300;
    for (std::uint64_t seed : {101, 102, 103, 104}) {
      const auto r = calib::simulate_clip_search(4, 1.0, n, default_grid(1.0), seed);
      lo = std::min(lo, r.c);
      hi = std::max(hi, r.c);
    }
    return (hi - lo) / lo;
  };
  CHECK(spread(400000) < spread(100000));
}

TEST_CASE("build_calib_table aggregates, persists, and reloads bit-exactly") {
  calib::CalibConfig cfg;
  cfg.n_samples = 100000;
  cfg.sigmas = {0.5, 1.0, 2.0};
  cfg.seeds_per_sigma = 3;
  cfg.base_seed = 5;
  cfg.workers = 2;
  const std::vector<int> bits{4, 8};
  const auto table = calib::build_calib_table(bits, cfg);

  CHECK(table.entries.size() == 2);
  CHECK(table.has(4));
  CHECK(table.has(8));
  CHECK(table.clip_ratio(4) > 0.0);
  CHECK_THROWS_AS(table.clip_ratio(5), std::out_of_range);
  CHECK(table.provenance.n_samples == cfg.n_samples);
  CHECK(table.provenance.sigmas == cfg.sigmas);
  CHECK(table.provenance.seeds.size() == 9);

  // more levels push the optimal clip outward: a*(8) >= a*(4) on the same draws
  const auto grid = default_grid(1.0);
  const auto samples = calib::draw_gaussian(200000, 1.0, 77);
  const auto r4 = calib::clip_search_on_samples(4, samples, grid);
  const auto r8 = calib::clip_search_on_samples(8, samples, grid);
  CHECK(r8.a_star >= r4.a_star);

  const std::string path =
      (std::filesystem::temp_directory_path() / "qpareto_calib_test.json").string();
  table.save(path);
  const auto reloaded = calib::CalibTable::load(path);
  CHECK(reloaded.entries == table.entries);
  CHECK(reloaded.provenance.n_samples == table.provenance.n_samples);
  CHECK(reloaded.provenance.sigmas == table.provenance.sigmas);
  CHECK(reloaded.provenance.seeds == table.provenance.seeds);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(calib::CalibTable::load("/nonexistent/dir/calib.json"), std::runtime_error);
  CHECK_THROWS_WITH_AS(table.save("/nonexistent/dir/calib.json"), doctest::Contains("/nonexistent"),
                       std::runtime_error);
}

TEST_CASE("build_calib_table validates its inputs") {
  calib::CalibConfig cfg;
  cfg.n_samples = 100000;
  const std::vector<int> bad{2};
  CHECK_THROWS_AS(calib::build_calib_table(bad, cfg), std::invalid_argument);
}
