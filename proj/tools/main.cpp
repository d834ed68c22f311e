#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qpareto/harness.hpp"

namespace fs = std::filesystem;
using namespace qpareto;

namespace {

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stod(tok));
  }
  return out;
}

std::optional<int> parse_bits(const std::string& s) {
  if (s.empty() || s == "unset") return std::nullopt;
  if (s == "none" || s == "fp") return 0;
  return std::stoi(s);
}

int cmd_calibrate(const std::string& bits_csv, std::size_t samples, std::uint64_t seed,
                  const std::string& sigmas_csv, int seeds_per_sigma, unsigned workers,
                  const std::string& out) {
  calib::CalibConfig cfg;
  cfg.n_samples = samples;
  cfg.base_seed = seed;
  cfg.sigmas = parse_double_list(sigmas_csv);
  cfg.seeds_per_sigma = seeds_per_sigma;
  cfg.workers = workers;
  const auto bits = parse_int_list(bits_csv);
  const auto table = calib::build_calib_table(bits, cfg);
  table.save(out);
  std::printf("wrote %s\n", out.c_str());
  for (const auto& [b, c] : table.entries) std::printf("  b=%d  c=%.6f\n", b, c);
  return 0;
}

arch::ArchSpec spec_from_flags(const std::string& family, double m, const std::string& bits_first,
                               const std::string& bits_last, const std::string& bits_conv,
                               const std::string& bits_dw, int classes, int in_hw,
                               const std::string& act_bits) {
  arch::ArchSpec s;
  s.family = arch::family_from_name(family);
  if (family.rfind("resnet", 0) == 0 && family.size() > 6) s.depth = std::stoi(family.substr(6));
  s.width_multiplier = m;
  s.bits.first = parse_bits(bits_first);
  s.bits.last = parse_bits(bits_last);
  s.bits.conv = parse_bits(bits_conv);
  s.bits.dwconv = parse_bits(bits_dw);
  s.classes = classes;
  s.in_hw = in_hw;
  s.act_bits = parse_bits(act_bits);
  if (s.act_bits && *s.act_bits == 0) s.act_bits.reset();
  return s;
}

int cmd_describe(const arch::ArchSpec& spec, bool as_json) {
  const auto report = arch::model_size(spec);
  if (as_json) {
    std::printf("{\"id\": \"%s\", \"total_bits\": %lld}\n", spec.id().c_str(),
                static_cast<long long>(report.total_bits));
    return 0;
  }
  std::printf("%s\n", spec.id().c_str());
  std::printf("%-24s %8s %5s %6s %4s %12s\n", "layer", "filters", "bits", "c_in", "k", "size_bits");
  for (const auto& row : report.per_layer) {
    std::printf("%-24s %8d %5d %6d %2dx%d %12lld\n", row.layer_id.c_str(), row.filters, row.bits,
                row.c_in, row.k_w, row.k_h, static_cast<long long>(row.size_bits));
  }
  std::printf("total: %lld bits (%.2f KiB)\n", static_cast<long long>(report.total_bits),
              static_cast<double>(report.total_bits) / 8.0 / 1024.0);
  return 0;
}

int cmd_train(const arch::ArchSpec& spec, const std::string& calib_path, std::uint64_t seed,
              int epochs, int warmup, int batch, double lr, double wd, double smoothing,
              int classes, int hw, int per_class, const std::string& checkpoint) {
  const auto table = calib::CalibTable::load(calib_path);
  data::SyntheticSpec dspec;
  dspec.classes = classes;
  dspec.hw = hw;
  dspec.train_per_class = per_class;
  dspec.val_per_class = std::max(1, per_class / 3);
  const auto split = data::make_synthetic(dspec);

  nn::Model model = arch::build(spec, table, seed ^ 0xabcdULL);
  nn::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.warmup_epochs = warmup;
  cfg.batch_size = batch;
  cfg.lr = lr;
  cfg.weight_decay = wd;
  cfg.label_smoothing = smoothing;
  cfg.seed = seed;
  cfg.best_checkpoint_path = checkpoint;
  const auto res = nn::train(model, split.train, split.val, cfg);
  for (std::size_t e = 0; e < res.val_acc_trace.size(); ++e) {
    std::printf("epoch %3zu  loss %.4f  val_acc %.2f%%\n", e, res.loss_trace[e],
                100.0 * res.val_acc_trace[e]);
  }
  std::printf("best: %.2f%% at epoch %d\n", 100.0 * res.best_val_acc, res.best_epoch);
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir, unsigned workers) {
  auto cfg = harness::ExperimentConfig::load(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  const auto records = harness::run_sweep(cfg, workers);
  std::size_t ok = 0, failed = 0;
  for (const auto& r : records) (r.status == "ok" ? ok : failed) += 1;
  std::printf("sweep complete: %zu ok, %zu failed; records in %s/records\n", ok, failed,
              cfg.out_dir.c_str());
  const auto rows = harness::group_records(records);
  const fs::path out(cfg.out_dir);
  {
    std::ofstream f(out / "pareto.csv");
    harness::write_pareto_csv(rows, f);
  }
  {
    std::ofstream f(out / "pareto.svg");
    harness::write_pareto_svg(rows, f);
  }
  if (cfg.decomposition) {
    const auto rep = harness::decomposition_report(cfg, records);
    std::ofstream f(out / "decomposition.csv");
    harness::write_decomposition_csv(rep, f);
  }
  std::printf("wrote %s/pareto.csv and pareto.svg\n", cfg.out_dir.c_str());
  return failed == 0 ? 0 : 1;
}

int cmd_report(const std::string& records_dir, const std::string& out_dir,
               const std::string& config_path) {
  const auto records = harness::load_records(records_dir);
  const auto rows = harness::group_records(records);
  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  {
    std::ofstream f(out / "pareto.csv");
    harness::write_pareto_csv(rows, f);
  }
  {
    std::ofstream f(out / "pareto.svg");
    harness::write_pareto_svg(rows, f);
  }
  std::printf("%zu records -> %zu pareto rows\n", records.size(), rows.size());
  if (!config_path.empty()) {
    const auto cfg = harness::ExperimentConfig::load(config_path);
    if (cfg.decomposition) {
      const auto rep = harness::decomposition_report(cfg, records);
      std::ofstream f(out / "decomposition.csv");
      harness::write_decomposition_csv(rep, f);
      std::printf("wrote %s/decomposition.csv (avg dQ %.2f, avg dG %.2f)\n", out_dir.c_str(),
                  rep.avg_delta_q, rep.avg_delta_g);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantization-aware training toolkit: bitwidth vs width Pareto experiments"};
  app.require_subcommand(1);

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "build the Gaussian clipping-ratio table");
  std::string cal_bits = "3,4,5,6,7,8", cal_sigmas = "0.5,1,2", cal_out = "calib.json";
  std::size_t cal_samples = 1000000;
  std::uint64_t cal_seed = 1;
  int cal_seeds = 3;
  unsigned cal_workers = 0;
  cal->add_option("--bits", cal_bits, "comma-separated bitwidths in 3..8");
  cal->add_option("--samples", cal_samples, "Gaussian samples per search (>= 1e5)");
  cal->add_option("--seed", cal_seed, "base seed");
  cal->add_option("--sigmas", cal_sigmas, "comma-separated sigma values");
  cal->add_option("--seeds-per-sigma", cal_seeds, "independent repetitions per sigma");
  cal->add_option("--workers", cal_workers, "search threads (0 = all cores)");
  cal->add_option("--out", cal_out, "output JSON path");

  // shared arch flags
  std::string family = "resnet20", bits_first = "8", bits_last = "8", bits_conv = "4",
              bits_dw = "4", act_bits = "";
  double width_mult = 1.0;
  int classes = 10, in_hw = 32;
  auto add_arch_flags = [&](CLI::App* c) {
    c->add_option("--family", family,
                  "resnet20..resnet56 | inv_resnet26 | vgg11 | vgg11_a/b/c | mobilenet_v2");
    c->add_option("--width-mult", width_mult, "width multiplier m");
    c->add_option("--bits-first", bits_first, "first layer bits (1..8, or none)");
    c->add_option("--bits-last", bits_last, "last layer bits");
    c->add_option("--bits-conv", bits_conv, "all-to-all conv bits");
    c->add_option("--bits-dw", bits_dw, "depth-wise conv bits");
    c->add_option("--classes", classes, "class count");
    c->add_option("--input-hw", in_hw, "input height/width");
    c->add_option("--act-bits", act_bits, "activation fake-quant bits (4 or 8; empty = off)");
  };

  auto* desc = app.add_subcommand("describe", "print the per-layer size report");
  bool desc_json = false;
  add_arch_flags(desc);
  desc->add_flag("--json", desc_json, "emit a JSON summary");

  auto* tr = app.add_subcommand("train", "train one model on the synthetic dataset");
  add_arch_flags(tr);
  std::string tr_calib = "calib.json", tr_checkpoint = "";
  std::uint64_t tr_seed = 1;
  int tr_epochs = 30, tr_warmup = 3, tr_batch = 64, tr_per_class = 100;
  double tr_lr = 0.05, tr_wd = 5e-4, tr_smooth = 0.0;
  tr->add_option("--calib", tr_calib, "calibration table path");
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--epochs", tr_epochs, "epochs");
  tr->add_option("--warmup-epochs", tr_warmup, "linear warmup epochs");
  tr->add_option("--batch-size", tr_batch, "batch size");
  tr->add_option("--lr", tr_lr, "peak learning rate");
  tr->add_option("--weight-decay", tr_wd, "weight decay");
  tr->add_option("--label-smoothing", tr_smooth, "label smoothing");
  tr->add_option("--per-class", tr_per_class, "training samples per class");
  tr->add_option("--checkpoint", tr_checkpoint, "best-checkpoint output path");

  auto* sw = app.add_subcommand("sweep", "run a Pareto sweep from a JSON config");
  std::string sw_config, sw_out = "";
  unsigned sw_workers = 1;
  sw->add_option("--config", sw_config, "experiment config JSON")->required();
  sw->add_option("--out", sw_out, "override the config's output directory");
  sw->add_option("--workers", sw_workers, "parallel training runs");

  auto* rp = app.add_subcommand("report", "regenerate CSV/SVG reports from stored records");
  std::string rp_records, rp_out = "report", rp_config = "";
  rp->add_option("--records", rp_records, "records directory")->required();
  rp->add_option("--out", rp_out, "output directory");
  rp->add_option("--config", rp_config, "config JSON (enables the decomposition report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cal->parsed()) {
      return cmd_calibrate(cal_bits, cal_samples, cal_seed, cal_sigmas, cal_seeds, cal_workers,
                           cal_out);
    }
    const arch::ArchSpec spec = spec_from_flags(family, width_mult, bits_first, bits_last,
                                                bits_conv, bits_dw, classes, in_hw, act_bits);
    if (desc->parsed()) return cmd_describe(spec, desc_json);
    if (tr->parsed()) {
      return cmd_train(spec, tr_calib, tr_seed, tr_epochs, tr_warmup, tr_batch, tr_lr, tr_wd,
                       tr_smooth, classes, in_hw, tr_per_class, tr_checkpoint);
    }
    if (sw->parsed()) return cmd_sweep(sw_config, sw_out, sw_workers);
    if (rp->parsed()) return cmd_report(rp_records, rp_out, rp_config);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
