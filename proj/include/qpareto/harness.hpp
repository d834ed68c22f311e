#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qpareto/arch.hpp"
#include "qpareto/data.hpp"
#include "qpareto/stats.hpp"
#include "qpareto/train.hpp"

namespace qpareto::harness {

struct DatasetSpec {
  std::string kind = "synthetic";  // "synthetic" | "cifar10" | "cifar100"
  data::SyntheticSpec synthetic;
  std::vector<std::string> train_files, val_files;  // cifar; relative to root
  std::string root;  // empty -> QPARETO_DATASET_ROOT

  std::string id() const;
  data::SplitDataset realize() const;
};

struct BitMapNamed {
  std::string name;
  arch::BitMap map;
};

/// Table-1-style protocol: for each multiplier w, compare high@w, low@w and
/// low@2w.
struct DecompositionSpec {
  std::string high_map, low_map;
  std::vector<double> multipliers;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  std::vector<std::string> families;  // e.g. "resnet20", "vgg11_c"
  std::vector<BitMapNamed> bit_maps;

  // Pareto targets: size of reference_map at each multiplier, or explicit bits.
  std::string reference_map;
  std::vector<double> reference_multipliers;
  std::vector<std::int64_t> explicit_target_bits;

  std::optional<DecompositionSpec> decomposition;

  nn::TrainConfig train;
  int repeats = 3;
  std::uint64_t base_seed = 1;
  double align_tolerance = 0.01;
  std::string calib_path;
  std::string out_dir = "runs";
  int classes = 5;
  int in_hw = 32;
  std::optional<int> act_bits;
  bool track_variance = false;
  std::string track_filter;  // layer-name substring for the mean|w| tracker

  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::string& path);

  const arch::BitMap& map_by_name(const std::string& n) const;
};

struct ExperimentRecord {
  arch::ArchSpec spec;
  std::string bits_name;
  std::uint64_t seed = 0;
  std::int64_t c_size_bits = 0;
  std::int64_t target_bits = 0;  // 0 when the multiplier was given explicitly
  std::string dataset_id;
  std::string status = "ok";  // "ok" | "failed"
  std::string error;
  double final_acc = 0.0;  // percent
  double best_acc = 0.0;   // percent
  std::vector<double> acc_trace;
  std::vector<stats::MeanAbsTracker::LayerVariance> variance;

  std::string filename() const;
  std::string to_json() const;
  /// Recomputes C_size from the spec and rejects a stored mismatch.
  static ExperimentRecord from_json(const std::string& text);
};

std::vector<ExperimentRecord> run_sweep(const ExperimentConfig& cfg, unsigned workers = 1);

/// Loads every record JSON under dir (the sweep writes one file per run).
std::vector<ExperimentRecord> load_records(const std::string& dir);

struct ParetoRow {
  std::string family;
  std::string bits_name;
  double m = 0.0;
  std::int64_t c_size_bits = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  int n_seeds = 0;

  bool operator==(const ParetoRow&) const = default;
};

std::vector<ParetoRow> group_records(const std::vector<ExperimentRecord>& records);
void write_pareto_csv(const std::vector<ParetoRow>& rows, std::ostream& os);
std::vector<ParetoRow> parse_pareto_csv(std::istream& is);
void write_pareto_svg(const std::vector<ParetoRow>& rows, std::ostream& os);

struct DecompositionReport {
  std::vector<double> multipliers;
  std::vector<stats::AccDecomposition> per_multiplier;
  double avg_delta_q = 0.0;
  double avg_delta_g = 0.0;
};

DecompositionReport decomposition_report(const ExperimentConfig& cfg,
                                         const std::vector<ExperimentRecord>& records);
void write_decomposition_csv(const DecompositionReport& rep, std::ostream& os);

}  // namespace qpareto::harness
