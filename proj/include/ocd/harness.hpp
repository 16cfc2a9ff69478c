#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ocd/config.hpp"
#include "ocd/datasets.hpp"
#include "ocd/hyperdiff.hpp"
#include "ocd/layer_select.hpp"
#include "ocd/overfit.hpp"
#include "ocd/scale.hpp"

namespace ocd {

/// A pipeline stage failed; `stage` names it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

enum class Stage { Base, Select, Collect, Diffusion, Scale, Eval };
std::string to_string(Stage s);

Splits make_data(const PipelineConfig& cfg, std::uint64_t seed);
MlpSpec base_spec(const PipelineConfig& cfg, const Dataset& train);
FinetuneOptions finetune_options(const PipelineConfig& cfg);

/// Test targets behind a log of which variant read them.
class LabelAudit {
 public:
  explicit LabelAudit(const Dataset& test) : test_(&test) {}
  Target target(const std::string& variant, Index i);
  const std::map<std::string, std::size_t>& reads() const { return reads_; }

 private:
  const Dataset* test_;
  std::map<std::string, std::size_t> reads_;
};

/// What a variant may see of the test split: inputs, plus labels only via
/// the audit.
struct TestView {
  const Matrix& inputs;
  LabelAudit& labels;
  Index size() const { return inputs.rows(); }
  Vector input(Index i) const { return inputs.row(i).transpose(); }
};

/// Everything trained against one layer of the base model.
struct LayerHead {
  Index layer = 0;
  RecordStore store;
  DiffusionBundle bundle;
  ScaleModel scale;
};

/// One head output (class probabilities or regression values) per test sample.
using Predictions = std::vector<Vector>;

Predictions predict_base(const MlpModel& base, const TestView& test);
/// Copy of `base` with `omega` at scale `rho` applied to the head's layer, per sample.
Predictions predict_shifted(const MlpModel& base, Index layer, const TestView& test,
                            const std::vector<Matrix>& omega, const std::vector<double>& rho);
/// The record whose x is nearest in L2 (ties: lowest index) supplies delta and rho.
Predictions predict_nearest_neighbor(const MlpModel& base, const LayerHead& head,
                                     const TestView& test);
std::size_t nearest_record(const RecordStore& store, const Vector& x);
/// Finetunes on each test sample with its true label, on the head's layer or
/// on every layer, and predicts that sample. Reads labels through the audit.
Predictions predict_overfit_on_test(const MlpModel& base, std::optional<Index> layer,
                                    const FinetuneOptions& opts, const TestView& test,
                                    const std::string& variant);

/// Draw j of test sample i uses stream (seed, 1000 + layer).substream(i).substream(j).
std::vector<std::vector<Matrix>> draw_deltas(DiffusionBundle& bundle, const MlpModel& base,
                                             const TestView& test, int k, std::uint64_t seed);
std::vector<double> predict_rho(const ScaleModel& scale, const MlpModel& base, Index layer,
                                const TestView& test);

/// Averages the k networks' head outputs (probabilities, not logits).
Predictions ensemble_logit_avg(const MlpModel& base, Index layer, const TestView& test,
                               const std::vector<std::vector<Matrix>>& draws,
                               const std::vector<double>& rho, int k);
/// Averages the k generated deltas, then predicts once.
Predictions ensemble_weight_avg(const MlpModel& base, Index layer, const TestView& test,
                                const std::vector<std::vector<Matrix>>& draws,
                                const std::vector<double>& rho, int k);

struct VariantMetrics {
  double loss = 0.0;                // mean CE or MSE
  std::optional<double> accuracy;   // classification only

  friend bool operator==(const VariantMetrics&, const VariantMetrics&) = default;
};

/// CE is -log of the predicted probability of the true class.
VariantMetrics score(const Predictions& pred, const Dataset& test);

struct SeedResult {
  std::uint64_t seed = 0;
  Index layer = 0;
  std::optional<Index> alt_layer;
  std::vector<std::pair<std::string, VariantMetrics>> rows;  // in evaluation order
  int min_distinct_draws = 0;  // over test samples, among the k ensemble draws
  std::map<std::string, std::size_t> label_reads;
  std::map<std::string, double> seconds;  // per stage

  const VariantMetrics* find(const std::string& variant) const;
  friend bool operator==(const SeedResult&, const SeedResult&) = default;
};

/// Row names, in report order. Ensembles add ocd_single_draw_mean (mean
/// metric over the k individual draws) and ocd_ens_<mode>.
std::vector<std::string> report_row_names(const PipelineConfig& cfg);

/// On-disk layout of a run: <root>/<config hash>/seed-<s>/...
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path seed_dir(std::uint64_t seed) const;
  std::filesystem::path base(std::uint64_t seed) const { return seed_dir(seed) / "base"; }
  std::filesystem::path layers(std::uint64_t seed) const { return seed_dir(seed) / "layers.csv"; }
  std::filesystem::path head(std::uint64_t seed, Index layer) const;
  std::filesystem::path metrics(std::uint64_t seed) const { return seed_dir(seed) / "metrics.json"; }
  std::filesystem::path timings(std::uint64_t seed) const { return seed_dir(seed) / "timings.json"; }
};
RunPaths run_paths(const std::filesystem::path& root, const PipelineConfig& cfg);

struct RunOptions {
  Stage until = Stage::Eval;
  bool verbose = false;
};

/// Runs (or loads from the run directory) every stage up to `until` for one
/// seed. Stages found on disk are loaded, not recomputed. Returns the seed
/// result when `until` is Eval.
std::optional<SeedResult> run_seed(const PipelineConfig& cfg, const RunPaths& paths,
                                   std::uint64_t seed, const RunOptions& opts);

std::string seed_result_to_json(const SeedResult& r);
SeedResult seed_result_from_json(const std::string& text);

struct MetricRow {
  std::string variant;
  std::string metric;  // CE, MSE or accuracy
  std::vector<double> per_seed;
  double mean = 0.0;
  std::optional<double> sd;  // sample SD; absent with fewer than 2 seeds

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct TimingRow {
  std::string stage;
  std::vector<double> per_seed;  // seconds
};

struct EvalReport {
  std::string config_hash;
  std::string config_text;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricRow> rows;
  std::vector<TimingRow> timings;

  const MetricRow* find(const std::string& variant, const std::string& metric) const;
  /// RFC-4180, CRLF line ends: config_hash,variant,metric,mean,sd,seed_<s>...
  std::string to_csv() const;
  std::string timings_csv() const;
  /// One table row per variant, then stage timings and the configuration.
  std::string to_markdown() const;
};

EvalReport build_report(const PipelineConfig& cfg, const std::vector<SeedResult>& results);

/// Writes report.csv, timings.csv and report.md into the run directory.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

/// Every seed through every stage, then the report. Returns the report.
EvalReport run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& root,
                        bool verbose = false);

/// Rebuilds the report from the per-seed metrics already in the run directory.
EvalReport report_from_disk(const PipelineConfig& cfg, const std::filesystem::path& root);

std::vector<std::vector<std::string>> parse_csv(const std::string& text);
std::string csv_field(const std::string& s);
/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace ocd
