#include "qpareto/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;

namespace qpareto::harness {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json bitmap_to_json(const arch::BitMap& m) {
  auto field = [](const std::optional<int>& b) {
    return b ? nlohmann::json(*b) : nlohmann::json(nullptr);
  };
  return {{"first", field(m.first)}, {"last", field(m.last)}, {"conv", field(m.conv)},
          {"dwconv", field(m.dwconv)}};
}

arch::BitMap bitmap_from_json(const nlohmann::json& j) {
  arch::BitMap m;
  auto field = [&](const char* key) -> std::optional<int> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<int>();
  };
  m.first = field("first");
  m.last = field("last");
  m.conv = field("conv");
  m.dwconv = field("dwconv");
  return m;
}

int parse_depth(const std::string& family) {
  if (family.rfind("resnet", 0) == 0 && family.size() > 6) return std::stoi(family.substr(6));
  return 20;
}

}  // namespace

std::string DatasetSpec::id() const {
  if (kind == "synthetic") {
    std::ostringstream os;
    os << "synthetic-c" << synthetic.classes << "-hw" << synthetic.hw << "-tr"
       << synthetic.train_per_class << "-va" << synthetic.val_per_class << "-noise"
       << synthetic.noise << "-seed" << synthetic.seed;
    return os.str();
  }
  return kind;
}

data::SplitDataset DatasetSpec::realize() const {
  if (kind == "synthetic") return data::make_synthetic(synthetic);
  if (kind == "cifar10" || kind == "cifar100") {
    std::string base = root;
    if (base.empty()) {
      const char* env = std::getenv("QPARETO_DATASET_ROOT");
      if (!env) {
        throw std::runtime_error(
            "DatasetSpec: no dataset root; set QPARETO_DATASET_ROOT or the config's root field");
      }
      base = env;
    }
    auto resolve = [&](const std::vector<std::string>& names) {
      std::vector<std::string> paths;
      for (const auto& n : names) paths.push_back((fs::path(base) / n).string());
      return paths;
    };
    const int classes = (kind == "cifar100") ? 100 : 10;
    data::SplitDataset split;
    split.train = data::load_cifar_binary(resolve(train_files), classes);
    split.val = data::load_cifar_binary(resolve(val_files), classes);
    return split;
  }
  throw std::invalid_argument("DatasetSpec: unknown kind '" + kind + "'");
}

const arch::BitMap& ExperimentConfig::map_by_name(const std::string& n) const {
  for (const auto& bm : bit_maps) {
    if (bm.name == n) return bm.map;
  }
  throw std::invalid_argument("ExperimentConfig: no bit map named '" + n + "'");
}

std::string ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["dataset"] = {{"kind", dataset.kind},
                  {"synthetic",
                   {{"classes", dataset.synthetic.classes},
                    {"hw", dataset.synthetic.hw},
                    {"channels", dataset.synthetic.channels},
                    {"train_per_class", dataset.synthetic.train_per_class},
                    {"val_per_class", dataset.synthetic.val_per_class},
                    {"noise", dataset.synthetic.noise},
                    {"seed", dataset.synthetic.seed}}},
                  {"train_files", dataset.train_files},
                  {"val_files", dataset.val_files},
                  {"root", dataset.root}};
  j["families"] = families;
  j["bit_maps"] = nlohmann::json::array();
  for (const auto& bm : bit_maps) {
    j["bit_maps"].push_back({{"name", bm.name}, {"map", bitmap_to_json(bm.map)}});
  }
  j["reference_map"] = reference_map;
  j["reference_multipliers"] = reference_multipliers;
  j["explicit_target_bits"] = explicit_target_bits;
  if (decomposition) {
    j["decomposition"] = {{"high", decomposition->high_map},
                          {"low", decomposition->low_map},
                          {"multipliers", decomposition->multipliers}};
  }
  j["train"] = {{"lr", train.lr},
                {"warmup_epochs", train.warmup_epochs},
                {"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"weight_decay", train.weight_decay},
                {"momentum", train.momentum},
                {"label_smoothing", train.label_smoothing}};
  j["repeats"] = repeats;
  j["base_seed"] = base_seed;
  j["align_tolerance"] = align_tolerance;
  j["calib_path"] = calib_path;
  j["out_dir"] = out_dir;
  j["classes"] = classes;
  j["in_hw"] = in_hw;
  j["act_bits"] = act_bits ? nlohmann::json(*act_bits) : nlohmann::json(nullptr);
  j["track_variance"] = track_variance;
  j["track_filter"] = track_filter;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ExperimentConfig c;
  c.name = j.value("name", "experiment");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.kind = d.value("kind", "synthetic");
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      c.dataset.synthetic.classes = s.value("classes", 5);
      c.dataset.synthetic.hw = s.value("hw", 32);
      c.dataset.synthetic.channels = s.value("channels", 3);
      c.dataset.synthetic.train_per_class = s.value("train_per_class", 100);
      c.dataset.synthetic.val_per_class = s.value("val_per_class", 40);
      c.dataset.synthetic.noise = s.value("noise", 0.25);
      c.dataset.synthetic.seed = s.value("seed", std::uint64_t{7});
    }
    c.dataset.train_files = d.value("train_files", std::vector<std::string>{});
    c.dataset.val_files = d.value("val_files", std::vector<std::string>{});
    c.dataset.root = d.value("root", "");
  }
  c.families = j.value("families", std::vector<std::string>{});
  if (j.contains("bit_maps")) {
    for (const auto& e : j.at("bit_maps")) {
      c.bit_maps.push_back({e.at("name").get<std::string>(), bitmap_from_json(e.at("map"))});
    }
  }
  c.reference_map = j.value("reference_map", "");
  c.reference_multipliers = j.value("reference_multipliers", std::vector<double>{});
  c.explicit_target_bits = j.value("explicit_target_bits", std::vector<std::int64_t>{});
  if (j.contains("decomposition") && !j.at("decomposition").is_null()) {
    DecompositionSpec d;
    d.high_map = j.at("decomposition").at("high").get<std::string>();
    d.low_map = j.at("decomposition").at("low").get<std::string>();
    d.multipliers = j.at("decomposition").at("multipliers").get<std::vector<double>>();
    c.decomposition = d;
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.lr = t.value("lr", 0.05);
    c.train.warmup_epochs = t.value("warmup_epochs", 5);
    c.train.epochs = t.value("epochs", 300);
    c.train.batch_size = t.value("batch_size", 128);
    c.train.weight_decay = t.value("weight_decay", 5e-4);
    c.train.momentum = t.value("momentum", 0.9);
    c.train.label_smoothing = t.value("label_smoothing", 0.0);
  }
  c.repeats = j.value("repeats", 3);
  c.base_seed = j.value("base_seed", std::uint64_t{1});
  c.align_tolerance = j.value("align_tolerance", 0.01);
  c.calib_path = j.value("calib_path", "");
  c.out_dir = j.value("out_dir", "runs");
  c.classes = j.value("classes", 5);
  c.in_hw = j.value("in_hw", 32);
  if (j.contains("act_bits") && !j.at("act_bits").is_null()) c.act_bits = j.at("act_bits").get<int>();
  c.track_variance = j.value("track_variance", false);
  c.track_filter = j.value("track_filter", "");
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("ExperimentConfig: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json(text);
}

std::string ExperimentRecord::filename() const {
  std::ostringstream os;
  os << bits_name << "_" << spec.id() << "_s" << seed << ".json";
  return os.str();
}

std::string ExperimentRecord::to_json() const {
  nlohmann::json j;
  j["spec"] = nlohmann::json::parse(spec.to_json());
  j["bits_name"] = bits_name;
  j["seed"] = seed;
  j["c_size_bits"] = c_size_bits;
  j["target_bits"] = target_bits;
  j["dataset_id"] = dataset_id;
  j["status"] = status;
  j["error"] = error;
  j["final_acc"] = final_acc;
  j["best_acc"] = best_acc;
  j["acc_trace"] = acc_trace;
  j["variance"] = nlohmann::json::array();
  for (const auto& v : variance) {
    j["variance"].push_back(
        {{"layer", v.layer}, {"fan_in", v.fan_in}, {"steps", v.steps}, {"variance", v.variance}});
  }
  return j.dump();
}

ExperimentRecord ExperimentRecord::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ExperimentRecord r;
  r.spec = arch::ArchSpec::from_json(j.at("spec").dump());
  r.bits_name = j.at("bits_name").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.c_size_bits = j.at("c_size_bits").get<std::int64_t>();
  r.target_bits = j.value("target_bits", std::int64_t{0});
  r.dataset_id = j.value("dataset_id", "");
  r.status = j.value("status", "ok");
  r.error = j.value("error", "");
  r.final_acc = j.value("final_acc", 0.0);
  r.best_acc = j.value("best_acc", 0.0);
  r.acc_trace = j.value("acc_trace", std::vector<double>{});
  if (j.contains("variance")) {
    for (const auto& v : j.at("variance")) {
      stats::MeanAbsTracker::LayerVariance lv;
      lv.layer = v.at("layer").get<std::string>();
      lv.fan_in = v.at("fan_in").get<long>();
      lv.steps = v.at("steps").get<long>();
      lv.variance = v.at("variance").get<double>();
      r.variance.push_back(lv);
    }
  }
  if (r.c_size_bits != 0) {
    const std::int64_t recomputed = arch::model_size(r.spec).total_bits;
    if (recomputed != r.c_size_bits) {
      throw std::runtime_error("ExperimentRecord: stored C_size " + std::to_string(r.c_size_bits) +
                               " does not match recomputed " + std::to_string(recomputed));
    }
  }
  return r;
}

namespace {

struct RunTask {
  arch::ArchSpec spec;
  std::string bits_name;
  std::uint64_t seed = 0;
  std::int64_t target_bits = 0;
};

arch::ArchSpec proto_spec(const ExperimentConfig& cfg, const std::string& family,
                          const arch::BitMap& map) {
  arch::ArchSpec s;
  s.family = arch::family_from_name(family);
  s.depth = parse_depth(family);
  s.bits = map;
  s.classes = cfg.classes;
  s.in_hw = cfg.in_hw;
  s.in_channels = cfg.dataset.kind == "synthetic" ? cfg.dataset.synthetic.channels : 3;
  s.act_bits = cfg.act_bits;
  return s;
}

ExperimentRecord run_one(const ExperimentConfig& cfg, const RunTask& task,
                         const calib::CalibTable& calib, const data::SplitDataset& split) {
  ExperimentRecord rec;
  rec.spec = task.spec;
  rec.bits_name = task.bits_name;
  rec.seed = task.seed;
  rec.target_bits = task.target_bits;
  rec.dataset_id = cfg.dataset.id();
  try {
    rec.c_size_bits = arch::model_size(task.spec).total_bits;
    nn::Model model = arch::build(task.spec, calib,
                                  task.seed ^ std::hash<std::string>{}(task.spec.id()));
    nn::TrainConfig tc = cfg.train;
    tc.seed = task.seed;

    nn::TrainResult res;
    if (cfg.track_variance) {
      const long steps_per_epoch =
          static_cast<long>((split.train.count() + tc.batch_size - 1) / tc.batch_size);
      stats::MeanAbsTracker tracker(cfg.track_filter, tc.warmup_epochs * steps_per_epoch);
      res = nn::train(model, split.train, split.val, tc,
                      [&tracker](long step, nn::Model& m) { tracker.observe(step, m); });
      rec.variance = tracker.layer_variances();
    } else {
      res = nn::train(model, split.train, split.val, tc);
    }
    rec.acc_trace = res.val_acc_trace;
    for (double& a : rec.acc_trace) a *= 100.0;
    rec.final_acc = rec.acc_trace.empty() ? 0.0 : rec.acc_trace.back();
    rec.best_acc = res.best_val_acc * 100.0;
  } catch (const std::exception& e) {
    rec.status = "failed";
    rec.error = e.what();
  }
  return rec;
}

}  // namespace

std::vector<ExperimentRecord> run_sweep(const ExperimentConfig& cfg, unsigned workers) {
  if (cfg.bit_maps.empty() || cfg.families.empty()) {
    throw std::invalid_argument("run_sweep: need at least one family and one bit map");
  }
  if (cfg.repeats < 1) throw std::invalid_argument("run_sweep: repeats must be >= 1");
  if (cfg.calib_path.empty()) {
    throw std::invalid_argument("run_sweep: calib_path is required (run `calibrate` first)");
  }
  const calib::CalibTable calib = calib::CalibTable::load(cfg.calib_path);
  const data::SplitDataset split = cfg.dataset.realize();

  const fs::path records_dir = fs::path(cfg.out_dir) / "records";
  fs::create_directories(records_dir);

  // assemble the run list; alignment failures become failed records up front
  std::vector<RunTask> tasks;
  std::vector<ExperimentRecord> failed;
  auto add_task = [&](const arch::ArchSpec& spec, const std::string& bits_name,
                      std::int64_t target, std::uint64_t seed) {
    RunTask t{spec, bits_name, seed, target};
    for (const RunTask& other : tasks) {
      ExperimentRecord a, b;
      a.spec = other.spec;
      a.bits_name = other.bits_name;
      a.seed = other.seed;
      b.spec = t.spec;
      b.bits_name = t.bits_name;
      b.seed = t.seed;
      if (a.filename() == b.filename()) return;  // shared run between protocols
    }
    tasks.push_back(t);
  };

  for (const std::string& family : cfg.families) {
    // Pareto part: size-aligned comparisons
    std::vector<std::int64_t> targets = cfg.explicit_target_bits;
    if (!cfg.reference_map.empty()) {
      arch::ArchSpec ref = proto_spec(cfg, family, cfg.map_by_name(cfg.reference_map));
      for (double mult : cfg.reference_multipliers) {
        ref.width_multiplier = mult;
        targets.push_back(arch::model_size(ref).total_bits);
      }
    }
    for (std::int64_t target : targets) {
      for (const auto& bm : cfg.bit_maps) {
        arch::ArchSpec proto = proto_spec(cfg, family, bm.map);
        try {
          proto.width_multiplier = arch::align_width(proto, target, cfg.align_tolerance);
        } catch (const std::exception& e) {
          for (int r = 0; r < cfg.repeats; ++r) {
            ExperimentRecord rec;
            rec.spec = proto;
            rec.bits_name = bm.name;
            rec.seed = cfg.base_seed + r;
            rec.target_bits = target;
            rec.dataset_id = cfg.dataset.id();
            rec.status = "failed";
            rec.error = e.what();
            failed.push_back(rec);
          }
          continue;
        }
        for (int r = 0; r < cfg.repeats; ++r) {
          add_task(proto, bm.name, target, cfg.base_seed + r);
        }
      }
    }
    // decomposition part: explicit multipliers
    if (cfg.decomposition) {
      const auto& d = *cfg.decomposition;
      for (double w : d.multipliers) {
        for (int r = 0; r < cfg.repeats; ++r) {
          arch::ArchSpec high = proto_spec(cfg, family, cfg.map_by_name(d.high_map));
          high.width_multiplier = w;
          add_task(high, d.high_map, 0, cfg.base_seed + r);
          arch::ArchSpec low = proto_spec(cfg, family, cfg.map_by_name(d.low_map));
          low.width_multiplier = w;
          add_task(low, d.low_map, 0, cfg.base_seed + r);
          arch::ArchSpec grown = proto_spec(cfg, family, cfg.map_by_name(d.low_map));
          grown.width_multiplier = 2.0 * w;
          add_task(grown, d.low_map, 0, cfg.base_seed + r);
        }
      }
    }
  }

  std::vector<ExperimentRecord> results = failed;
  std::mutex results_mu;
  std::atomic<std::size_t> next{0};
  auto worker_fn = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const RunTask& task = tasks[i];
      ExperimentRecord probe;
      probe.spec = task.spec;
      probe.bits_name = task.bits_name;
      probe.seed = task.seed;
      const fs::path path = records_dir / probe.filename();
      ExperimentRecord rec;
      if (fs::exists(path)) {  // resume: trust (and validate) the stored record
        std::ifstream f(path);
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        rec = ExperimentRecord::from_json(text);
        rec.target_bits = task.target_bits;
      } else {
        rec = run_one(cfg, task, calib, split);
        std::ofstream f(path);
        f << rec.to_json() << "\n";
      }
      std::lock_guard<std::mutex> lock(results_mu);
      results.push_back(rec);
    }
  };
  workers = std::max(1u, workers);
  std::vector<std::thread> pool;
  for (unsigned i = 0; i + 1 < workers; ++i) pool.emplace_back(worker_fn);
  worker_fn();
  for (auto& th : pool) th.join();

  std::sort(results.begin(), results.end(), [](const ExperimentRecord& a, const ExperimentRecord& b) {
    ExperimentRecord ka = a, kb = b;
    return ka.filename() < kb.filename();
  });
  return results;
}

std::vector<ExperimentRecord> load_records(const std::string& dir) {
  std::vector<ExperimentRecord> out;
  if (!fs::exists(dir)) return out;
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    std::ifstream f(p);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    out.push_back(ExperimentRecord::from_json(text));
  }
  return out;
}

std::vector<ParetoRow> group_records(const std::vector<ExperimentRecord>& records) {
  struct Agg {
    std::vector<double> accs;
    std::int64_t c_size = 0;
    double m = 0.0;
    std::string family, bits;
  };
  std::map<std::string, Agg> groups;
  for (const auto& r : records) {
    if (r.status != "ok") continue;
    std::string fam = arch::family_name(r.spec.family);
    if (r.spec.family == arch::Family::ResNet) fam += std::to_string(r.spec.depth);
    std::ostringstream key;
    key << fam << "|" << r.bits_name << "|" << fmt_double(r.spec.width_multiplier);
    Agg& a = groups[key.str()];
    a.accs.push_back(r.final_acc);
    a.c_size = r.c_size_bits;
    a.m = r.spec.width_multiplier;
    a.family = fam;
    a.bits = r.bits_name;
  }
  std::vector<ParetoRow> rows;
  for (const auto& [key, a] : groups) {
    ParetoRow row;
    row.family = a.family;
    row.bits_name = a.bits;
    row.m = a.m;
    row.c_size_bits = a.c_size;
    row.n_seeds = static_cast<int>(a.accs.size());
    double mean = 0.0;
    for (double v : a.accs) mean += v;
    mean /= a.accs.size();
    double ss = 0.0;
    for (double v : a.accs) ss += (v - mean) * (v - mean);
    row.acc_mean = mean;
    row.acc_std = a.accs.size() > 1 ? std::sqrt(ss / (a.accs.size() - 1.0)) : 0.0;
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const ParetoRow& a, const ParetoRow& b) {
    if (a.family != b.family) return a.family < b.family;
    if (a.bits_name != b.bits_name) return a.bits_name < b.bits_name;
    return a.c_size_bits < b.c_size_bits;
  });
  return rows;
}

void write_pareto_csv(const std::vector<ParetoRow>& rows, std::ostream& os) {
  os << "family,bits,m,c_size_bits,acc_mean,acc_std,n_seeds\n";
  for (const auto& r : rows) {
    os << r.family << "," << r.bits_name << "," << fmt_double(r.m) << "," << r.c_size_bits << ","
       << fmt_double(r.acc_mean) << "," << fmt_double(r.acc_std) << "," << r.n_seeds << "\n";
  }
}

std::vector<ParetoRow> parse_pareto_csv(std::istream& is) {
  std::vector<ParetoRow> rows;
  std::string line;
  if (!std::getline(is, line)) return rows;
  if (line != "family,bits,m,c_size_bits,acc_mean,acc_std,n_seeds") {
    throw std::runtime_error("parse_pareto_csv: unexpected header: " + line);
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) parts.push_back(tok);
    if (parts.size() != 7) throw std::runtime_error("parse_pareto_csv: bad row: " + line);
    ParetoRow r;
    r.family = parts[0];
    r.bits_name = parts[1];
    r.m = std::strtod(parts[2].c_str(), nullptr);
    r.c_size_bits = std::strtoll(parts[3].c_str(), nullptr, 10);
    r.acc_mean = std::strtod(parts[4].c_str(), nullptr);
    r.acc_std = std::strtod(parts[5].c_str(), nullptr);
    r.n_seeds = std::atoi(parts[6].c_str());
    rows.push_back(r);
  }
  return rows;
}

void write_pareto_svg(const std::vector<ParetoRow>& rows, std::ostream& os) {
  const int W = 720, H = 540;
  const int ml = 80, mr = 170, mt = 40, mb = 60;
  const double pw = W - ml - mr, ph = H - mt - mb;

  double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
  for (const auto& r : rows) {
    const double kb = static_cast<double>(r.c_size_bits) / 1024.0;
    x_lo = std::min(x_lo, kb);
    x_hi = std::max(x_hi, kb);
    y_lo = std::min(y_lo, r.acc_mean - r.acc_std);
    y_hi = std::max(y_hi, r.acc_mean + r.acc_std);
  }
  if (rows.empty()) {
    x_lo = 0.0; x_hi = 1.0; y_lo = 0.0; y_hi = 100.0;
  }
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  if (y_hi <= y_lo) y_hi = y_lo + 1.0;
  const double xpad = 0.05 * (x_hi - x_lo), ypad = 0.05 * (y_hi - y_lo);
  x_lo -= xpad; x_hi += xpad; y_lo -= ypad; y_hi += ypad;

  auto sx = [&](double v) { return ml + pw * (v - x_lo) / (x_hi - x_lo); };
  auto sy = [&](double v) { return mt + ph * (1.0 - (v - y_lo) / (y_hi - y_lo)); };

  std::vector<std::string> groups;
  for (const auto& r : rows) {
    if (std::find(groups.begin(), groups.end(), r.bits_name) == groups.end()) {
      groups.push_back(r.bits_name);
    }
  }
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  auto color = [&](const std::string& g) {
    const auto it = std::find(groups.begin(), groups.end(), g);
    return palette[(it - groups.begin()) % 6];
  };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
     << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x_lo + (x_hi - x_lo) * i / 5.0;
    const double yv = y_lo + (y_hi - y_lo) * i / 5.0;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << mt + ph + 20
       << "\" font-size=\"11\" text-anchor=\"middle\">" << static_cast<long>(xv) << "</text>\n";
    os << "<line x1=\"" << sx(xv) << "\" y1=\"" << mt + ph << "\" x2=\"" << sx(xv) << "\" y2=\""
       << mt + ph + 4 << "\" stroke=\"black\"/>\n";
    char ybuf[32];
    std::snprintf(ybuf, sizeof(ybuf), "%.1f", yv);
    os << "<text x=\"" << ml - 8 << "\" y=\"" << sy(yv) + 4
       << "\" font-size=\"11\" text-anchor=\"end\">" << ybuf << "</text>\n";
    os << "<line x1=\"" << ml - 4 << "\" y1=\"" << sy(yv) << "\" x2=\"" << ml << "\" y2=\""
       << sy(yv) << "\" stroke=\"black\"/>\n";
  }
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 15
     << "\" font-size=\"13\" text-anchor=\"middle\">model size C_size (Kbits)</text>\n";
  os << "<text x=\"18\" y=\"" << mt + ph / 2
     << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << mt + ph / 2
     << ")\">validation accuracy (%)</text>\n";

  for (const auto& r : rows) {
    const double kb = static_cast<double>(r.c_size_bits) / 1024.0;
    const std::string col = color(r.bits_name);
    if (r.acc_std > 0.0) {
      os << "<line x1=\"" << sx(kb) << "\" y1=\"" << sy(r.acc_mean - r.acc_std) << "\" x2=\""
         << sx(kb) << "\" y2=\"" << sy(r.acc_mean + r.acc_std) << "\" stroke=\"" << col
         << "\" stroke-width=\"1.5\"/>\n";
    }
    os << "<circle cx=\"" << sx(kb) << "\" cy=\"" << sy(r.acc_mean) << "\" r=\"4\" fill=\"" << col
       << "\"><title>" << r.family << " " << r.bits_name << " m=" << r.m << "</title></circle>\n";
  }

  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double y = mt + 16 + 20.0 * i;
    os << "<circle cx=\"" << ml + pw + 20 << "\" cy=\"" << y << "\" r=\"4\" fill=\""
       << color(groups[i]) << "\"/>\n";
    os << "<text x=\"" << ml + pw + 30 << "\" y=\"" << y + 4 << "\" font-size=\"12\">"
       << groups[i] << "</text>\n";
  }
  os << "</svg>\n";
}

DecompositionReport decomposition_report(const ExperimentConfig& cfg,
                                         const std::vector<ExperimentRecord>& records) {
  if (!cfg.decomposition) {
    throw std::invalid_argument("decomposition_report: config has no decomposition section");
  }
  if (cfg.families.empty()) {
    throw std::invalid_argument("decomposition_report: config lists no families");
  }
  const std::string family = cfg.families.front();
  const auto& d = *cfg.decomposition;

  auto mean_acc = [&](const std::string& map_name, double m) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : records) {
      if (r.status != "ok" || r.bits_name != map_name) continue;
      std::string fam = arch::family_name(r.spec.family);
      if (r.spec.family == arch::Family::ResNet) fam += std::to_string(r.spec.depth);
      if (fam != family) continue;
      if (std::abs(r.spec.width_multiplier - m) > 1e-9) continue;
      sum += r.final_acc;
      ++n;
    }
    if (n == 0) {
      std::ostringstream os;
      os << "decomposition_report: missing triplet member '" << map_name << "' at " << m
         << "x for family " << family;
      throw std::runtime_error(os.str());
    }
    return sum / n;
  };

  DecompositionReport rep;
  rep.multipliers = d.multipliers;
  for (double w : d.multipliers) {
    stats::RunSummary high{family, cfg.dataset.id(), mean_acc(d.high_map, w)};
    stats::RunSummary low{family, cfg.dataset.id(), mean_acc(d.low_map, w)};
    stats::RunSummary grown{family, cfg.dataset.id(), mean_acc(d.low_map, 2.0 * w)};
    rep.per_multiplier.push_back(stats::decompose_accuracy(high, low, grown));
  }
  for (const auto& dec : rep.per_multiplier) {
    rep.avg_delta_q += dec.delta_q;
    rep.avg_delta_g += dec.delta_g;
  }
  if (!rep.per_multiplier.empty()) {
    rep.avg_delta_q /= rep.per_multiplier.size();
    rep.avg_delta_g /= rep.per_multiplier.size();
  }
  return rep;
}

void write_decomposition_csv(const DecompositionReport& rep, std::ostream& os) {
  os << "width_multiplier";
  for (double w : rep.multipliers) os << "," << fmt_double(w);
  os << ",average\n";
  os << "delta_acc_q";
  for (const auto& d : rep.per_multiplier) os << "," << fmt_double(d.delta_q);
  os << "," << fmt_double(rep.avg_delta_q) << "\n";
  os << "delta_acc_g";
  for (const auto& d : rep.per_multiplier) os << "," << fmt_double(d.delta_g);
  os << "," << fmt_double(rep.avg_delta_g) << "\n";
}

}  // namespace qpareto::harness
