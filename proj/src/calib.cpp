#include "qpareto/calib.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "qpareto/quant.hpp"

namespace qpareto::calib {

std::vector<double> draw_gaussian(std::size_t n, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> out(n);
  for (double& v : out) v = dist(rng);
  return out;
}

std::vector<double> log_spaced_grid(double lo, double hi, std::size_t points) {
  if (!(lo > 0.0) || !(hi > lo) || points < 2) {
    throw std::invalid_argument("log_spaced_grid: need 0 < lo < hi and >= 2 points");
  }
  std::vector<double> grid(points);
  const double llo = std::log(lo), lhi = std::log(hi);
  for (std::size_t i = 0; i < points; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(points - 1);
    grid[i] = std::exp(llo + t * (lhi - llo));
  }
  return grid;
}

double quantization_mse(std::span<const double> samples, int bitwidth, double a) {
  if (bitwidth < 3) throw std::invalid_argument("quantization_mse: wrong scheme (need bitwidth >= 3)");
  if (!(a > 0.0)) throw std::invalid_argument("quantization_mse: invalid clip");
  const double levels = static_cast<double>((1 << (bitwidth - 1)) - 1);
  const double r = a / levels;
  const double inv_r = 1.0 / r;
  double acc = 0.0;
  for (double w : samples) {
    const double v = std::clamp(w, -a, a);
    const double q = quant::round_half_away(v * inv_r) * r;
    const double e = q - w;
    acc += e * e;
  }
  return acc;
}

ClipSearchResult clip_search_on_samples(int bitwidth, std::span<const double> samples,
                                        std::span<const double> candidate_grid) {
  if (candidate_grid.size() < 50) {
    throw std::invalid_argument("clip_search: grid too coarse (need >= 50 candidate points)");
  }
  ClipSearchResult best;
  best.mean_abs = quant::mean_abs(samples);
  best.mse = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidate_grid.size(); ++i) {
    const double mse = quantization_mse(samples, bitwidth, candidate_grid[i]);
    if (mse < best.mse) {
      best.mse = mse;
      best.a_star = candidate_grid[i];
      best.grid_index = i;
    }
  }
  best.c = best.mean_abs / best.a_star;
  return best;
}

ClipSearchResult simulate_clip_search(int bitwidth, double sigma, std::size_t n_samples,
                                      std::span<const double> candidate_grid,
                                      std::uint64_t seed) {
  if (n_samples < 100'000) {
    throw std::invalid_argument("simulate_clip_search: need at least 1e5 samples");
  }
  const std::vector<double> samples = draw_gaussian(n_samples, sigma, seed);
  return clip_search_on_samples(bitwidth, samples, candidate_grid);
}

double CalibTable::clip_ratio(int bitwidth) const {
  auto it = entries.find(bitwidth);
  if (it == entries.end()) {
    throw std::out_of_range("CalibTable: no clip ratio for bitwidth " + std::to_string(bitwidth));
  }
  return it->second;
}

std::string CalibTable::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["entries"] = nlohmann::json::array();
  for (const auto& [b, c] : entries) {
    j["entries"].push_back({{"bitwidth", b}, {"c", c}});
  }
  j["provenance"] = {
      {"n_samples", provenance.n_samples},
      {"sigmas", provenance.sigmas},
      {"seeds", provenance.seeds},
      {"grid_points", provenance.grid_points},
      {"grid_lo_sigma", provenance.grid_lo_sigma},
      {"grid_hi_sigma", provenance.grid_hi_sigma},
  };
  return j.dump(2);
}

CalibTable CalibTable::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  CalibTable t;
  for (const auto& e : j.at("entries")) {
    t.entries[e.at("bitwidth").get<int>()] = e.at("c").get<double>();
  }
  const auto& p = j.at("provenance");
  t.provenance.n_samples = p.at("n_samples").get<std::size_t>();
  t.provenance.sigmas = p.at("sigmas").get<std::vector<double>>();
  t.provenance.seeds = p.at("seeds").get<std::vector<std::uint64_t>>();
  t.provenance.grid_points = p.at("grid_points").get<std::size_t>();
  t.provenance.grid_lo_sigma = p.at("grid_lo_sigma").get<double>();
  t.provenance.grid_hi_sigma = p.at("grid_hi_sigma").get<double>();
  return t;
}

void CalibTable::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("CalibTable: cannot open for write: " + path);
  f << to_json() << "\n";
  if (!f) throw std::runtime_error("CalibTable: write failed: " + path);
}

CalibTable CalibTable::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("CalibTable: cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json(text);
}

CalibTable build_calib_table(std::span<const int> bit_list, const CalibConfig& cfg) {
  for (int b : bit_list) {
    if (b < 3 || b > 8) {
      throw std::invalid_argument("build_calib_table: bitwidths must lie in {3..8}");
    }
  }
  if (cfg.sigmas.empty() || cfg.seeds_per_sigma < 1) {
    throw std::invalid_argument("build_calib_table: need at least one sigma and one seed");
  }

  struct Task {
    int bit;
    double sigma;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  std::vector<std::uint64_t> used_seeds;
  for (int b : bit_list) {
    for (std::size_t si = 0; si < cfg.sigmas.size(); ++si) {
      for (int k = 0; k < cfg.seeds_per_sigma; ++k) {
        // distinct stream per (sigma, seed index); shared across bitwidths so
        // every bitwidth sees the same weight draws
        const std::uint64_t seed = cfg.base_seed + 1000 * si + static_cast<std::uint64_t>(k);
        tasks.push_back({b, cfg.sigmas[si], seed});
        if (b == bit_list.front()) used_seeds.push_back(seed);
      }
    }
  }

  std::vector<double> c_sums(tasks.size(), 0.0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      const auto grid =
          log_spaced_grid(cfg.grid_lo_sigma * t.sigma, cfg.grid_hi_sigma * t.sigma, cfg.grid_points);
      c_sums[i] = simulate_clip_search(t.bit, t.sigma, cfg.n_samples, grid, t.seed).c;
    }
  };
  unsigned n_workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
  n_workers = std::min<unsigned>(n_workers, tasks.size());
  std::vector<std::thread> pool;
  for (unsigned i = 0; i + 1 < n_workers; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  CalibTable table;
  for (int b : bit_list) table.entries[b] = 0.0;
  std::map<int, int> counts;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    table.entries[tasks[i].bit] += c_sums[i];
    counts[tasks[i].bit] += 1;
  }
  for (auto& [b, c] : table.entries) c /= counts[b];

  table.provenance.n_samples = cfg.n_samples;
  table.provenance.sigmas = cfg.sigmas;
  table.provenance.seeds = used_seeds;
  table.provenance.grid_points = cfg.grid_points;
  table.provenance.grid_lo_sigma = cfg.grid_lo_sigma;
  table.provenance.grid_hi_sigma = cfg.grid_hi_sigma;
  return table;
}

}  // namespace qpareto::calib
