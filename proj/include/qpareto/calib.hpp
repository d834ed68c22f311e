#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace qpareto::calib {

/// Samples and grid shared between the table builder and test oracles.
std::vector<double> draw_gaussian(std::size_t n, double sigma, std::uint64_t seed);
std::vector<double> log_spaced_grid(double lo, double hi, std::size_t points);

struct ClipSearchResult {
  double a_star = 0.0;   // grid argmin of || Q_a(W) - W ||^2
  double c = 0.0;        // mean|W| / a_star
  double mean_abs = 0.0;
  double mse = 0.0;      // objective value at a_star
  std::size_t grid_index = 0;
};

/// Quantization MSE of the uniform b-bit quantizer with clip `a` over the
/// given samples, summed (not averaged).
double quantization_mse(std::span<const double> samples, int bitwidth, double a);

/// Grid search over candidate clips on caller-provided samples.
ClipSearchResult clip_search_on_samples(int bitwidth, std::span<const double> samples,
                                        std::span<const double> candidate_grid);

/// Draws W ~ N(0, sigma^2 I) once and locates the MSE-minimizing clip on the
/// candidate grid. Deterministic given the seed.
ClipSearchResult simulate_clip_search(int bitwidth, double sigma, std::size_t n_samples,
                                      std::span<const double> candidate_grid,
                                      std::uint64_t seed);

struct CalibConfig {
  std::size_t n_samples = 1'000'000;
  std::vector<double> sigmas = {0.5, 1.0, 2.0};
  int seeds_per_sigma = 3;
  std::uint64_t base_seed = 1;
  std::size_t grid_points = 400;
  double grid_lo_sigma = 0.25;  // grid spans [lo*sigma, hi*sigma], log spaced
  double grid_hi_sigma = 8.0;
  unsigned workers = 0;  // 0 -> hardware concurrency
};

struct CalibProvenance {
  std::size_t n_samples = 0;
  std::vector<double> sigmas;
  std::vector<std::uint64_t> seeds;
  std::size_t grid_points = 0;
  double grid_lo_sigma = 0.0;
  double grid_hi_sigma = 0.0;
};

/// bitwidth -> clip ratio c = mean|W| / a*, averaged over (sigma, seed) runs.
struct CalibTable {
  std::map<int, double> entries;
  CalibProvenance provenance;

  double clip_ratio(int bitwidth) const;  // throws if bitwidth missing
  bool has(int bitwidth) const { return entries.count(bitwidth) != 0; }

  void save(const std::string& path) const;
  static CalibTable load(const std::string& path);

  std::string to_json() const;
  static CalibTable from_json(const std::string& text);
};

CalibTable build_calib_table(std::span<const int> bit_list, const CalibConfig& cfg);

}  // namespace qpareto::calib
