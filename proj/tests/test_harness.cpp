#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ocd/config.hpp"
#include "ocd/error.hpp"
#include "ocd/harness.hpp"

using namespace ocd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "ocd_test_harness" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Dataset tiny_classification() {
  Dataset d;
  d.task = TaskKind::Classification;
  d.num_classes = 3;
  d.inputs = Matrix::Zero(2, 2);
  d.labels = {0, 2};
  return d;
}

MlpModel random_model(std::vector<Index> sizes, OutputHead head, std::uint64_t seed) {
  RngStream rng(seed, 0);
  MlpModel m = init_mlp({std::move(sizes), Activation::Tanh, head}, rng);
  for (auto& l : m.layers) l.bias = rng.gaussian_vector(l.bias.size());
  return m;
}

}  // namespace

TEST_CASE("config: defaults validate, canonical text round-trips, hash tracks content") {
  for (const auto& name : preset_names()) {
    const PipelineConfig c = preset_config(name);
    CHECK_NOTHROW(c.validate());
    const PipelineConfig back = resolve_config(parse_config_text(c.canonical()), {});
    CHECK(back == c);
    CHECK(back.hash() == c.hash());
    CHECK(c.hash().size() == 16);
  }
  PipelineConfig c = preset_config("blobs");
  const std::string h = c.hash();
  c.diffusion_lr = 2e-3;
  CHECK(c.hash() != h);
  CHECK(preset_config("tabular").hash() != h);
  const std::string text = c.canonical();
  CHECK(config_keys().size() == static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST_CASE("config: preset < file < flags") {
  const auto file = parse_config_text(
      "# comment line\n"
      "preset = tabular\n"
      "diffusion_epochs = 7   # trailing comment\n"
      "seeds = 1, 2\n"
      "\n"
      "hidden = 4,4\n");
  const PipelineConfig from_file = resolve_config(file, {});
  CHECK(from_file.dataset == "tabular");
  CHECK(from_file.finetune_lr == 1e-2);
  CHECK(from_file.diffusion_epochs == 7);
  CHECK(from_file.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(from_file.hidden == std::vector<Index>{4, 4});

  const PipelineConfig flagged =
      resolve_config(file, {{"diffusion_epochs", "3"}, {"preset", "smoke-tabular"}});
  CHECK(flagged.diffusion_epochs == 3);
  CHECK(flagged.n == 400);           // from the flag's preset
  CHECK(flagged.seeds.size() == 2);  // file still beats preset
}

TEST_CASE("config: malformed input is rejected with a location") {
  CHECK_THROWS_WITH_AS(parse_config_text("n = 5\nno equals sign\n"), doctest::Contains("line 2"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("n = 5\nn = 6\n"), doctest::Contains("repeated"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"bogus", "1"}}, {}), doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"n", "12x"}}, {}), doctest::Contains("n:"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"attention", "maybe"}}, {}), doctest::Contains("attention"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"split_test", "0.5"}}, {}), doctest::Contains("sum to 1"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"variants", "base,magic"}}, {}), doctest::Contains("magic"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"seeds", "1,1"}}, {}), doctest::Contains("distinct"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({{"cond_dim", "7"}}, {}), doctest::Contains("cond_dim"), ConfigError);
  CHECK_THROWS_WITH_AS(resolve_config({}, {{"preset", "huge"}}), doctest::Contains("huge"), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"dataset", "csv"}}, {}), ConfigError);
}

TEST_CASE("csv: RFC-4180 quoting and parsing") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");

  const auto rows = parse_csv("a,b,c\r\n\"x,1\",\"he said \"\"no\"\"\",\r\n\"multi\nline\",2,3");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"a", "b", "c"});
  CHECK(rows[1] == std::vector<std::string>{"x,1", "he said \"no\"", ""});
  CHECK(rows[2] == std::vector<std::string>{"multi\nline", "2", "3"});
  CHECK_THROWS_AS(parse_csv("\"open"), FormatError);

  RngStream rng(1, 0);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::ldexp(rng.gaussian(), static_cast<int>(rng.uniform_index(200)) - 100);
    CHECK(std::stod(format_double(v)) == v);
  }
}

TEST_CASE("score: cross-entropy, accuracy and MSE against hand values") {
  const Dataset d = tiny_classification();
  Vector p0(3), p1(3);
  p0 << 0.5, 0.25, 0.25;
  p1 << 0.1, 0.6, 0.3;
  const auto m = score({p0, p1}, d);
  CHECK(m.loss == doctest::Approx((std::log(2.0) - std::log(0.3)) / 2).epsilon(1e-15));
  CHECK(*m.accuracy == 0.5);
  CHECK_THROWS_AS(score({p0}, d), DimensionError);

  Dataset r;
  r.task = TaskKind::Regression;
  r.inputs = Matrix::Zero(2, 1);
  r.targets = Matrix(2, 2);
  r.targets << 1, 2, 3, 4;
  Vector y0(2), y1(2);
  y0 << 1, 0;  // squared errors 0, 4
  y1 << 4, 4;  // squared errors 1, 0
  const auto mr = score({y0, y1}, r);
  CHECK(mr.loss == 1.25);
  CHECK(!mr.accuracy);
}

TEST_CASE("label audit: reads are charged to the variant that made them") {
  const Dataset d = tiny_classification();
  LabelAudit audit(d);
  CHECK(audit.reads().empty());
  CHECK(audit.target("overfit_on_test", 1).label == 2);
  audit.target("overfit_on_test", 0);
  audit.target("other", 0);
  CHECK(audit.reads().at("overfit_on_test") == 2);
  CHECK(audit.reads().at("other") == 1);
}

TEST_CASE("nearest_neighbor: duplicated training point and ties") {
  RecordStore st;
  for (int i = 0; i < 4; ++i) {
    OverfitRecord r;
    r.x = Vector::Constant(2, static_cast<double>(i));
    r.delta_norm = Matrix::Constant(1, 1, 1.0);
    r.rho = 1.0 + i;
    st.records.push_back(r);
  }
  CHECK(nearest_record(st, st.records[2].x) == 2);
  CHECK(nearest_record(st, Vector::Constant(2, 2.2)) == 2);
  CHECK(nearest_record(st, Vector::Constant(2, 0.5)) == 0);  // equidistant from 0 and 1
  st.records[3].x = st.records[1].x;
  CHECK(nearest_record(st, st.records[1].x) == 1);
  CHECK_THROWS(nearest_record(RecordStore{}, Vector::Zero(2)));
}

TEST_CASE("ensembles: k=1 and identical draws reduce to the single draw; Jensen bound") {
  const MlpModel base = random_model({3, 5, 4}, OutputHead::SoftmaxClassifier, 11);
  const Index layer = 0;
  RngStream rng(12, 0);
  Dataset test;
  test.task = TaskKind::Classification;
  test.num_classes = 4;
  test.inputs = rng.gaussian_matrix(30, 3);
  for (int i = 0; i < 30; ++i) test.labels.push_back(static_cast<int>(rng.uniform_index(4)));
  LabelAudit audit(test);
  const TestView view{test.inputs, audit};

  std::vector<std::vector<Matrix>> draws(30), same(30);
  std::vector<double> rho;
  std::vector<Matrix> first;
  for (int i = 0; i < 30; ++i) {
    for (int j = 0; j < 5; ++j) draws[i].push_back(rng.gaussian_matrix(5, 4) / std::sqrt(20.0));
    same[i].assign(5, draws[i][0]);
    first.push_back(draws[i][0]);
    rho.push_back(0.5 + rng.uniform());
  }
  const auto single = predict_shifted(base, layer, view, first, rho);
  const auto l1 = ensemble_logit_avg(base, layer, view, draws, rho, 1);
  const auto w1 = ensemble_weight_avg(base, layer, view, draws, rho, 1);
  const auto ws = ensemble_weight_avg(base, layer, view, same, rho, 4);
  for (int i = 0; i < 30; ++i) {
    CHECK(l1[i] == single[i]);
    CHECK(w1[i] == single[i]);
    CHECK((ws[i] - single[i]).cwiseAbs().maxCoeff() < 1e-15);
  }

  // -log is convex, so averaging probabilities never loses to the mean draw
  const auto ens = score(ensemble_logit_avg(base, layer, view, draws, rho, 5), test);
  double mean = 0.0;
  for (int j = 0; j < 5; ++j) {
    std::vector<Matrix> dj;
    for (const auto& per : draws) dj.push_back(per[j]);
    mean += score(predict_shifted(base, layer, view, dj, rho), test).loss / 5;
  }
  CHECK(ens.loss <= mean);
  CHECK(audit.reads().empty());
}

TEST_CASE("report: markdown rows, CSV round trip and config hash") {
  PipelineConfig cfg = preset_config("smoke");
  cfg.seeds = {1, 2};
  std::vector<SeedResult> results;
  for (std::uint64_t s : cfg.seeds) {
    SeedResult r;
    r.seed = s;
    double v = 0.1 * static_cast<double>(s);
    for (const auto& name : report_row_names(cfg)) {
      r.rows.emplace_back(name, VariantMetrics{v, v / 3});
      v += 1.0 / 7.0;
    }
    r.seconds = {{"train-base", 1.5}, {"eval", 0.25}};
    results.push_back(r);
  }
  const EvalReport rep = build_report(cfg, results);
  CHECK(rep.config_hash == cfg.hash());
  CHECK(rep.rows.size() == 2 * report_row_names(cfg).size());
  const MetricRow* base = rep.find("base", "CE");
  REQUIRE(base);
  CHECK(base->mean == doctest::Approx(0.15));
  CHECK(*base->sd == doctest::Approx(std::sqrt(0.005)));

  const auto csv = parse_csv(rep.to_csv());
  REQUIRE(csv.size() == rep.rows.size() + 1);
  CHECK(csv[0] == std::vector<std::string>{"config_hash", "variant", "metric", "mean", "sd", "seed_1", "seed_2"});
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    const auto& row = csv[i + 1];
    CHECK(row[0] == cfg.hash());
    CHECK(row[1] == rep.rows[i].variant);
    CHECK(std::stod(row[3]) == rep.rows[i].mean);
    CHECK(std::stod(row[4]) == *rep.rows[i].sd);
    CHECK(std::stod(row[5]) == rep.rows[i].per_seed[0]);
    CHECK(std::stod(row[6]) == rep.rows[i].per_seed[1]);
  }

  const std::string md = rep.to_markdown();
  CHECK(md.find(cfg.hash()) != std::string::npos);
  const auto table_start = md.find("| Variant");
  const auto table_end = md.find("\n\n", table_start);
  const std::string table = md.substr(table_start, table_end - table_start);
  CHECK(std::count(table.begin(), table.end(), '\n') + 1 ==
        static_cast<long>(report_row_names(cfg).size()) + 2);

  // one seed: SD marked absent
  const EvalReport one = build_report(cfg, {results[0]});
  CHECK(!one.rows[0].sd);
  CHECK(parse_csv(one.to_csv())[1][4].empty());
}

TEST_CASE("pipeline: smoke run, audit, resumption and reproducibility") {
  const PipelineConfig cfg = preset_config("smoke");
  const fs::path root = scratch("smoke");
  const auto t0 = std::chrono::steady_clock::now();
  const EvalReport rep = run_pipeline(cfg, root);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("smoke pipeline took " << secs << " s");
  CHECK(secs < 60.0);

  const RunPaths paths = run_paths(root, cfg);
  CHECK(paths.dir.filename() == cfg.hash());
  for (const auto& name : report_row_names(cfg)) CHECK(rep.find(name, "CE"));
  CHECK(rep.find("overfit_on_test", "accuracy")->mean == 1.0);
  CHECK(slurp(paths.dir / "config.txt") == cfg.canonical());

  for (auto seed : cfg.seeds) {
    const auto r = *run_seed(cfg, paths, seed, {});
    for (const auto& [variant, reads] : r.label_reads) {
      CHECK((variant == "overfit_on_test" || variant == "overfit_on_test_all"));
      CHECK(reads > 0);
    }
    CHECK(r.label_reads.size() == 2);
    CHECK(r.min_distinct_draws >= 2);
    CHECK(r.alt_layer);
    CHECK(*r.alt_layer != r.layer);
    CHECK(fs::exists(paths.head(seed, *r.alt_layer) / "diffusion" / "manifest.json"));
  }

  const std::string csv = slurp(paths.dir / "report.csv");
  const std::string md = slurp(paths.dir / "report.md");

  // rerun over the same directory: everything loads, nothing changes
  run_pipeline(cfg, root);
  CHECK(slurp(paths.dir / "report.csv") == csv);
  CHECK(slurp(paths.dir / "report.md") == md);

  // deleting only the report regenerates it bit-identically
  fs::remove(paths.dir / "report.csv");
  fs::remove(paths.dir / "report.md");
  report_from_disk(cfg, root);
  CHECK(slurp(paths.dir / "report.csv") == csv);
  CHECK(slurp(paths.dir / "report.md") == md);

  // deleting the metrics recomputes eval from the stored checkpoints
  fs::remove(paths.metrics(cfg.seeds[0]));
  run_pipeline(cfg, root);
  CHECK(slurp(paths.dir / "report.csv") == csv);

  // an independent run from scratch agrees on every number
  const fs::path other = scratch("smoke-again");
  run_pipeline(cfg, other);
  CHECK(slurp(run_paths(other, cfg).dir / "report.csv") == csv);

  // evaluation order does not matter
  PipelineConfig reversed = cfg;
  std::reverse(reversed.variants.begin(), reversed.variants.end());
  const RunPaths rpaths = run_paths(scratch("reversed"), reversed);
  fs::create_directories(rpaths.dir);
  fs::copy(paths.dir, rpaths.dir, fs::copy_options::recursive);
  for (auto seed : cfg.seeds) {
    fs::remove(rpaths.metrics(seed));
    const auto r = *run_seed(reversed, rpaths, seed, {});
    const auto orig = *run_seed(cfg, paths, seed, {});
    for (const auto& [variant, m] : orig.rows) {
      REQUIRE(r.find(variant));
      CHECK(*r.find(variant) == m);
    }
  }
}

TEST_CASE("pipeline: stage failures name the stage") {
  PipelineConfig cfg = preset_config("smoke");
  cfg.dataset = "csv";
  cfg.csv_path = "/nonexistent/table.csv";
  cfg.csv_target = "y";
  const fs::path root = scratch("failure");
  try {
    run_pipeline(cfg, root);
    FAIL("expected a stage failure");
  } catch (const StageError& e) {
    CHECK(e.stage() == "data");
  }

  PipelineConfig one_layer = preset_config("smoke");
  one_layer.hidden = {};
  CHECK_THROWS_AS(one_layer.validate(), ConfigError);

  // a truncated checkpoint surfaces as a failure of the stage that loads it
  PipelineConfig ok = preset_config("smoke");
  ok.seeds = {42};
  ok.variants = {"base"};
  const fs::path root2 = scratch("corrupt");
  const RunPaths paths = run_paths(root2, ok);
  run_seed(ok, paths, 42, {Stage::Base, false});
  std::ofstream(paths.base(42) / "W0.f64", std::ios::trunc) << "x";
  try {
    run_seed(ok, paths, 42, {Stage::Base, false});
    FAIL("expected a stage failure");
  } catch (const StageError& e) {
    CHECK(e.stage() == "train-base");
  }
}
