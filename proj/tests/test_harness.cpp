#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "qpareto/harness.hpp"

using namespace qpareto;
namespace fs = std::filesystem;

namespace {

harness::ExperimentConfig tiny_config(const std::string& out_dir, const std::string& calib_path) {
  harness::ExperimentConfig cfg;
  cfg.name = "tiny";
  cfg.dataset.kind = "synthetic";
  cfg.dataset.synthetic.classes = 3;
  cfg.dataset.synthetic.hw = 8;
  cfg.dataset.synthetic.channels = 3;
  cfg.dataset.synthetic.train_per_class = 20;
  cfg.dataset.synthetic.val_per_class = 10;
  cfg.dataset.synthetic.seed = 77;
  cfg.families = {"resnet20"};
  cfg.bit_maps.push_back({"w4", arch::BitMap{8, 8, 4, 4}});
  cfg.bit_maps.push_back({"w1", arch::BitMap{8, 8, 1, 1}});
  cfg.reference_map = "w4";
  cfg.reference_multipliers = {0.05};
  cfg.train.epochs = 2;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 30;
  cfg.train.lr = 0.05;
  cfg.repeats = 2;
  cfg.base_seed = 3;
  cfg.calib_path = calib_path;
  cfg.out_dir = out_dir;
  cfg.classes = 3;
  cfg.in_hw = 8;
  return cfg;
}

std::string make_calib(const fs::path& dir) {
  calib::CalibConfig cc;
  cc.n_samples = 100000;
  cc.sigmas = {1.0};
  cc.seeds_per_sigma = 1;
  cc.grid_points = 200;
  cc.workers = 2;
  const std::vector<int> bits{3, 4, 5, 6, 7, 8};
  const auto table = calib::build_calib_table(bits, cc);
  const std::string path = (dir / "calib.json").string();
  table.save(path);
  return path;
}

arch::ArchSpec record_spec(const std::string& family, double m, const arch::BitMap& bits) {
  arch::ArchSpec s;
  s.family = arch::family_from_name(family);
  s.width_multiplier = m;
  s.bits = bits;
  s.classes = 3;
  s.in_hw = 8;
  return s;
}

harness::ExperimentRecord fake_record(const std::string& family, const std::string& bits_name,
                                      const arch::BitMap& bits, double m, std::uint64_t seed,
                                      double acc) {
  harness::ExperimentRecord r;
  r.spec = record_spec(family, m, bits);
  r.bits_name = bits_name;
  r.seed = seed;
  r.c_size_bits = arch::model_size(r.spec).total_bits;
  r.dataset_id = "synthetic-test";
  r.final_acc = acc;
  r.best_acc = acc;
  return r;
}

}  // namespace

TEST_CASE("experiment config json round trip with defaults") {
  harness::ExperimentConfig cfg;
  cfg.name = "demo";
  cfg.families = {"vgg11"};
  cfg.bit_maps.push_back({"w2", arch::BitMap{8, 8, 2, 2}});
  cfg.decomposition = harness::DecompositionSpec{"w4", "w1", {1.0, 1.5}};
  const auto parsed = harness::ExperimentConfig::from_json(cfg.to_json());
  CHECK(parsed.name == "demo");
  CHECK(parsed.families == cfg.families);
  CHECK(parsed.bit_maps.size() == 1);
  CHECK(parsed.bit_maps[0].map == cfg.bit_maps[0].map);
  CHECK(parsed.repeats == 3);  // default per the protocol
  REQUIRE(parsed.decomposition.has_value());
  CHECK(parsed.decomposition->high_map == "w4");
  CHECK(parsed.decomposition->multipliers == std::vector<double>{1.0, 1.5});

  const auto bare = harness::ExperimentConfig::from_json("{}");
  CHECK(bare.repeats == 3);
  CHECK(bare.align_tolerance == 0.01);
  CHECK_FALSE(bare.decomposition.has_value());
}

TEST_CASE("experiment record round trips and validates its stored size") {
  auto rec = fake_record("resnet20", "w4", arch::BitMap{8, 8, 4, 4}, 0.25, 5, 61.25);
  const auto parsed = harness::ExperimentRecord::from_json(rec.to_json());
  CHECK(parsed.bits_name == "w4");
  CHECK(parsed.seed == 5);
  CHECK(parsed.final_acc == 61.25);
  CHECK(parsed.c_size_bits == rec.c_size_bits);

  // corrupt the stored size: load must reject it
  auto j = rec.to_json();
  const auto pos = j.find(std::to_string(rec.c_size_bits));
  REQUIRE(pos != std::string::npos);
  j.replace(pos, std::to_string(rec.c_size_bits).size(), std::to_string(rec.c_size_bits + 64));
  CHECK_THROWS_WITH_AS(harness::ExperimentRecord::from_json(j), doctest::Contains("C_size"),
                       std::runtime_error);
}

TEST_CASE("pareto csv: header-only when empty, row per group, exact round trip") {
  std::vector<harness::ParetoRow> empty;
  std::ostringstream os;
  harness::write_pareto_csv(empty, os);
  CHECK(os.str() == "family,bits,m,c_size_bits,acc_mean,acc_std,n_seeds\n");

  std::vector<harness::ExperimentRecord> records;
  const arch::BitMap w4{8, 8, 4, 4}, w1{8, 8, 1, 1};
  records.push_back(fake_record("resnet20", "w4", w4, 0.25, 1, 60.0));
  records.push_back(fake_record("resnet20", "w4", w4, 0.25, 2, 62.0));
  records.push_back(fake_record("resnet20", "w1", w1, 0.515625, 1, 63.0));
  auto failed = fake_record("resnet20", "w1", w1, 0.75, 3, 0.0);
  failed.status = "failed";
  failed.error = "train: non-finite loss at epoch 0";
  records.push_back(failed);

  const auto rows = harness::group_records(records);
  REQUIRE(rows.size() == 2);  // the failed record is excluded from groups
  CHECK(rows[0].bits_name == "w1");
  CHECK(rows[0].n_seeds == 1);
  CHECK(rows[1].bits_name == "w4");
  CHECK(rows[1].n_seeds == 2);
  CHECK(rows[1].acc_mean == doctest::Approx(61.0));
  CHECK(rows[1].acc_std == doctest::Approx(std::sqrt(2.0)));

  std::ostringstream emitted;
  harness::write_pareto_csv(rows, emitted);
  std::istringstream back(emitted.str());
  const auto parsed = harness::parse_pareto_csv(back);
  CHECK(parsed == rows);  // codec identity, bit-exact doubles
}

TEST_CASE("pareto svg emits one marker per row with a legend") {
  std::vector<harness::ParetoRow> rows;
  rows.push_back({"vgg11", "w1", 2.0, 1000000, 61.5, 0.5, 3});
  rows.push_back({"vgg11", "w4", 1.0, 1000000, 60.0, 0.4, 3});
  rows.push_back({"vgg11", "w4", 2.0, 3900000, 64.0, 0.2, 3});
  std::ostringstream os;
  harness::write_pareto_svg(rows, os);
  const std::string svg = os.str();
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  std::size_t markers = 0;
  for (std::size_t p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) {
    ++markers;
  }
  CHECK(markers == rows.size() + 2);  // one per point, one per legend entry
  CHECK(svg.find("w1") != std::string::npos);
  CHECK(svg.find("w4") != std::string::npos);
}

TEST_CASE("decomposition report: table layout, telescoping, and missing members") {
  harness::ExperimentConfig cfg;
  cfg.families = {"resnet20"};
  cfg.bit_maps.push_back({"w4", arch::BitMap{8, 8, 4, 4}});
  cfg.bit_maps.push_back({"w1", arch::BitMap{8, 8, 1, 1}});
  cfg.decomposition = harness::DecompositionSpec{"w4", "w1", {1.0, 1.5}};

  const arch::BitMap w4{8, 8, 4, 4}, w1{8, 8, 1, 1};
  std::vector<harness::ExperimentRecord> records;
  records.push_back(fake_record("resnet20", "w4", w4, 1.0, 1, 70.0));
  records.push_back(fake_record("resnet20", "w1", w1, 1.0, 1, 68.46));
  records.push_back(fake_record("resnet20", "w1", w1, 2.0, 1, 71.07));
  records.push_back(fake_record("resnet20", "w4", w4, 1.5, 1, 71.0));
  records.push_back(fake_record("resnet20", "w1", w1, 1.5, 1, 69.0));
  records.push_back(fake_record("resnet20", "w1", w1, 3.0, 1, 72.0));

  const auto rep = harness::decomposition_report(cfg, records);
  REQUIRE(rep.per_multiplier.size() == 2);
  CHECK(rep.per_multiplier[0].delta_q == doctest::Approx(-1.54));
  CHECK(rep.per_multiplier[0].delta_g == doctest::Approx(2.61));
  CHECK(rep.per_multiplier[0].delta_q + rep.per_multiplier[0].delta_g ==
        doctest::Approx(71.07 - 70.0).epsilon(1e-12));
  CHECK(rep.avg_delta_q ==
        doctest::Approx(0.5 * (rep.per_multiplier[0].delta_q + rep.per_multiplier[1].delta_q)));

  std::ostringstream os;
  harness::write_decomposition_csv(rep, os);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  CHECK(header == "width_multiplier,1,1.5,average");
  std::string qrow, grow;
  std::getline(is, qrow);
  std::getline(is, grow);
  CHECK(qrow.rfind("delta_acc_q,", 0) == 0);
  CHECK(grow.rfind("delta_acc_g,", 0) == 0);

  // symmetric inputs give zero deltas
  std::vector<harness::ExperimentRecord> same;
  same.push_back(fake_record("resnet20", "w4", w4, 1.0, 1, 70.0));
  same.push_back(fake_record("resnet20", "w1", w1, 1.0, 1, 70.0));
  same.push_back(fake_record("resnet20", "w1", w1, 2.0, 1, 70.0));
  harness::ExperimentConfig cfg2 = cfg;
  cfg2.decomposition->multipliers = {1.0};
  const auto rep2 = harness::decomposition_report(cfg2, same);
  CHECK(rep2.avg_delta_q == 0.0);
  CHECK(rep2.avg_delta_g == 0.0);

  // missing 2x member is named in the error
  std::vector<harness::ExperimentRecord> missing = same;
  missing.pop_back();
  CHECK_THROWS_WITH_AS(harness::decomposition_report(cfg2, missing), doctest::Contains("w1"),
                       std::runtime_error);
}

TEST_CASE("run_sweep: cardinality, size alignment, resume idempotence") {
  const fs::path dir = fs::temp_directory_path() / "qpareto_sweep_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string calib_path = make_calib(dir);

  auto cfg = tiny_config((dir / "out").string(), calib_path);
  const auto records = harness::run_sweep(cfg, 2);
  // 2 bit maps x 1 target size x 2 repeats
  REQUIRE(records.size() == 4);
  for (const auto& r : records) {
    CHECK(r.status == "ok");
    CHECK(r.target_bits > 0);
    // every record for one target matches it within the alignment tolerance
    CHECK(std::abs(static_cast<double>(r.c_size_bits) - static_cast<double>(r.target_bits)) /
              static_cast<double>(r.target_bits) <=
          0.01);
    CHECK(r.acc_trace.size() == 2);
  }
  // all records for one target size agree within 1% of each other
  for (const auto& a : records) {
    for (const auto& b : records) {
      if (a.target_bits != b.target_bits) continue;
      CHECK(std::abs(static_cast<double>(a.c_size_bits) - static_cast<double>(b.c_size_bits)) /
                static_cast<double>(a.c_size_bits) <=
            0.02);
    }
  }

  // the sweep persisted one file per run
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "out" / "records")) {
    if (e.path().extension() == ".json") ++files;
  }
  CHECK(files == 4);

  // resume: a second sweep reloads rather than retrains, bit-identically
  const auto again = harness::run_sweep(cfg, 1);
  REQUIRE(again.size() == records.size());
  for (std::size_t i = 0; i < again.size(); ++i) {
    CHECK(again[i].final_acc == records[i].final_acc);
    CHECK(again[i].seed == records[i].seed);
    CHECK(again[i].c_size_bits == records[i].c_size_bits);
  }

  const auto loaded = harness::load_records((dir / "out" / "records").string());
  CHECK(loaded.size() == 4);

  fs::remove_all(dir);
}

TEST_CASE("run_sweep rejects configs it cannot honor") {
  harness::ExperimentConfig cfg;
  CHECK_THROWS_AS(harness::run_sweep(cfg, 1), std::invalid_argument);
  cfg.families = {"resnet20"};
  cfg.bit_maps.push_back({"w4", arch::BitMap{8, 8, 4, 4}});
  cfg.calib_path = "";
  CHECK_THROWS_WITH_AS(harness::run_sweep(cfg, 1), doctest::Contains("calib"),
                       std::invalid_argument);
}
