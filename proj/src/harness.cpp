#include "ocd/harness.hpp"

#include <algorithm>
#include <cfloat>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ocd/checkpoint.hpp"
#include "ocd/train.hpp"

namespace ocd {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Base: return "train-base";
    case Stage::Select: return "select-layer";
    case Stage::Collect: return "collect";
    case Stage::Diffusion: return "train-diffusion";
    case Stage::Scale: return "train-scale";
    case Stage::Eval: return "eval";
  }
  return "?";
}

Splits make_data(const PipelineConfig& cfg, std::uint64_t seed) {
  Dataset raw;
  if (cfg.dataset == "blobs") {
    raw = gen_blobs(seed, cfg.n, cfg.classes, cfg.spread, cfg.dim);
  } else if (cfg.dataset == "tabular") {
    raw = gen_tabular_reg(seed, cfg.n, cfg.dim, cfg.noise);
  } else if (cfg.dataset == "csv") {
    raw = load_csv_table(cfg.csv_path, cfg.csv_target);
  } else {
    raw = load_idx(cfg.idx_images, cfg.idx_labels, static_cast<std::size_t>(cfg.n));
  }
  return split(raw, {cfg.split_train, cfg.split_val, cfg.split_test, seed});
}

MlpSpec base_spec(const PipelineConfig& cfg, const Dataset& train) {
  MlpSpec spec;
  spec.layer_sizes.push_back(train.dim());
  for (Index h : cfg.hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(train.target_dim());
  spec.hidden_activation = activation_from_string(cfg.activation);
  spec.output_head = train.task == TaskKind::Classification ? OutputHead::SoftmaxClassifier
                                                            : OutputHead::LinearRegressor;
  spec.validate();
  return spec;
}

FinetuneOptions finetune_options(const PipelineConfig& cfg) {
  FinetuneOptions fo;
  fo.steps = cfg.finetune_steps;
  fo.lr = cfg.finetune_lr;
  return fo;
}

Target LabelAudit::target(const std::string& variant, Index i) {
  ++reads_[variant];
  return test_->target(i);
}

// ---------------------------------------------------------------- variants

Predictions predict_base(const MlpModel& base, const TestView& test) {
  Predictions out;
  out.reserve(static_cast<std::size_t>(test.size()));
  for (Index i = 0; i < test.size(); ++i) out.push_back(mlp_forward(base, test.input(i)).output);
  return out;
}

Predictions predict_shifted(const MlpModel& base, Index layer, const TestView& test,
                            const std::vector<Matrix>& omega, const std::vector<double>& rho) {
  Predictions out;
  for (Index i = 0; i < test.size(); ++i) {
    const auto s = static_cast<std::size_t>(i);
    out.push_back(mlp_forward(apply_weights(base, layer, omega[s], rho[s]), test.input(i)).output);
  }
  return out;
}

std::size_t nearest_record(const RecordStore& store, const Vector& x) {
  if (store.records.empty()) throw std::invalid_argument("nearest_record: empty store");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < store.records.size(); ++j) {
    const double d = (store.records[j].x - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

Predictions predict_nearest_neighbor(const MlpModel& base, const LayerHead& head,
                                     const TestView& test) {
  std::vector<Matrix> omega;
  std::vector<double> rho;
  for (Index i = 0; i < test.size(); ++i) {
    const auto& r = head.store.records[nearest_record(head.store, test.input(i))];
    omega.push_back(r.delta_norm);
    rho.push_back(r.rho);
  }
  return predict_shifted(base, head.layer, test, omega, rho);
}

Predictions predict_overfit_on_test(const MlpModel& base, std::optional<Index> layer,
                                    const FinetuneOptions& opts, const TestView& test,
                                    const std::string& variant) {
  Predictions out;
  for (Index i = 0; i < test.size(); ++i) {
    const Vector x = test.input(i);
    const auto ft = finetune_sample(base, layer, x, test.labels.target(variant, i), opts,
                                    static_cast<std::size_t>(i));
    out.push_back(mlp_forward(ft.model, x).output);
  }
  return out;
}

std::vector<std::vector<Matrix>> draw_deltas(DiffusionBundle& bundle, const MlpModel& base,
                                             const TestView& test, int k, std::uint64_t seed) {
  std::vector<ConditioningTuple> conds;
  for (Index i = 0; i < test.size(); ++i) conds.push_back(make_conditioning(base, bundle.layer, test.input(i)));
  const RngStream root(seed, 1000 + static_cast<std::uint64_t>(bundle.layer));
  std::vector<std::vector<Matrix>> draws(conds.size());
  for (int j = 0; j < k; ++j) {
    std::vector<RngStream> rngs;
    for (std::size_t i = 0; i < conds.size(); ++i) {
      rngs.push_back(root.substream(i).substream(static_cast<std::uint64_t>(j)));
    }
    auto omega = sample_delta(bundle, conds, rngs);
    for (std::size_t i = 0; i < conds.size(); ++i) draws[i].push_back(std::move(omega[i]));
  }
  return draws;
}

std::vector<double> predict_rho(const ScaleModel& scale, const MlpModel& base, Index layer,
                                const TestView& test) {
  std::vector<double> rho;
  for (Index i = 0; i < test.size(); ++i) {
    const Vector x = test.input(i);
    rho.push_back(scale_forward(scale, x, make_conditioning(base, layer, x)));
  }
  return rho;
}

Predictions ensemble_logit_avg(const MlpModel& base, Index layer, const TestView& test,
                               const std::vector<std::vector<Matrix>>& draws,
                               const std::vector<double>& rho, int k) {
  Predictions out;
  for (Index i = 0; i < test.size(); ++i) {
    const auto s = static_cast<std::size_t>(i);
    const Vector x = test.input(i);
    Vector sum;
    for (int j = 0; j < k; ++j) {
      const Vector y = mlp_forward(apply_weights(base, layer, draws[s][j], rho[s]), x).output;
      sum = j == 0 ? y : (sum + y).eval();
    }
    out.push_back(sum / static_cast<double>(k));
  }
  return out;
}

Predictions ensemble_weight_avg(const MlpModel& base, Index layer, const TestView& test,
                                const std::vector<std::vector<Matrix>>& draws,
                                const std::vector<double>& rho, int k) {
  std::vector<Matrix> mean;
  for (Index i = 0; i < test.size(); ++i) {
    const auto s = static_cast<std::size_t>(i);
    Matrix m = draws[s][0];
    for (int j = 1; j < k; ++j) m += draws[s][j];
    mean.push_back(m / static_cast<double>(k));
  }
  return predict_shifted(base, layer, test, mean, rho);
}

VariantMetrics score(const Predictions& pred, const Dataset& test) {
  if (static_cast<Index>(pred.size()) != test.size()) {
    throw DimensionError("score: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(test.size()) + " test samples");
  }
  VariantMetrics m;
  const auto n = static_cast<double>(pred.size());
  if (test.task == TaskKind::Classification) {
    double ce = 0.0, hits = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int y = test.labels[i];
      ce -= std::log(std::max(pred[i][y], DBL_MIN));
      Index arg = 0;
      pred[i].maxCoeff(&arg);
      hits += arg == y ? 1.0 : 0.0;
    }
    m.loss = ce / n;
    m.accuracy = hits / n;
  } else {
    double se = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      se += (pred[i] - test.targets.row(static_cast<Index>(i)).transpose()).squaredNorm() /
            static_cast<double>(pred[i].size());
    }
    m.loss = se / n;
  }
  return m;
}

const VariantMetrics* SeedResult::find(const std::string& variant) const {
  for (const auto& [name, m] : rows) {
    if (name == variant) return &m;
  }
  return nullptr;
}

std::vector<std::string> report_row_names(const PipelineConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& v : kVariants) {
    if (!cfg.wants(v)) continue;
    names.push_back(v);
    if (v == "ocd" && !cfg.ensemble_modes.empty()) {
      names.push_back("ocd_single_draw_mean");
      for (const auto& mode : cfg.ensemble_modes) names.push_back("ocd_ens_" + mode);
    }
  }
  return names;
}

// ------------------------------------------------------------------ stages

fs::path RunPaths::seed_dir(std::uint64_t seed) const { return dir / ("seed-" + std::to_string(seed)); }

fs::path RunPaths::head(std::uint64_t seed, Index layer) const {
  return seed_dir(seed) / ("layer-" + std::to_string(layer));
}

RunPaths run_paths(const fs::path& root, const PipelineConfig& cfg) { return {root / cfg.hash()}; }

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, file);
}

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes a directory under a temporary name and renames it into place, so a
// stage directory exists only once it is complete.
template <class Fn>
void save_dir(const fs::path& dir, Fn&& write) {
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  write(tmp);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

class Timings {
 public:
  explicit Timings(fs::path file) : file_(std::move(file)) {
    if (fs::exists(file_)) {
      const json j = json::parse(read_text(file_));
      for (const auto& [k, v] : j.items()) seconds_[k] = v.get<double>();
    }
  }
  void record(const std::string& stage, double s) {
    seconds_[stage] = s;
    write_text(file_, json(seconds_).dump(2) + "\n");
  }
  const std::map<std::string, double>& seconds() const { return seconds_; }

 private:
  fs::path file_;
  std::map<std::string, double> seconds_;
};

struct Log {
  bool on;
  std::uint64_t seed;
  void operator()(const std::string& msg) const {
    if (on) std::cerr << "[seed " << seed << "] " << msg << std::endl;
  }
};

template <class Fn>
auto stage_guard(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

DiffusionConfig diffusion_config(const PipelineConfig& cfg) {
  return {cfg.diffusion_T, cfg.cond_dim, cfg.channels, cfg.levels, cfg.attention, cfg.spatial_hidden};
}

// Stages for one layer head. `tag` prefixes timing keys ("" or "alt_").
std::optional<LayerHead> run_head(const PipelineConfig& cfg, const RunPaths& paths, std::uint64_t seed,
                                  const MlpModel& base, const Dataset& train, Index layer,
                                  const std::string& tag, Stage until, Timings& timings, const Log& log) {
  const fs::path dir = paths.head(seed, layer);
  const std::string checksum = model_checksum(base);
  const auto salt = static_cast<std::uint64_t>(layer) * 16;

  RecordStore store = stage_guard(tag + "collect", [&] {
    if (fs::exists(dir / "records")) return load_records(dir / "records");
    log("collect: finetuning layer " + std::to_string(layer) + " on " + std::to_string(train.size()) +
        " samples");
    const auto t0 = std::chrono::steady_clock::now();
    RecordStore fresh = collect(base, layer, train, finetune_options(cfg));
    if (fresh.records.empty()) throw NumericalError("every training sample gave a zero delta");
    save_dir(dir / "records", [&](const fs::path& d) { save_records(d, fresh); });
    timings.record(tag + "collect", seconds_since(t0));
    return fresh;
  });
  if (until == Stage::Collect) return std::nullopt;

  DiffusionBundle bundle = stage_guard(tag + "train-diffusion", [&] {
    if (fs::exists(dir / "diffusion")) return load_bundle(dir / "diffusion", checksum);
    log("train-diffusion: layer " + std::to_string(layer));
    const auto t0 = std::chrono::steady_clock::now();
    RngStream init(seed, 100 + salt);
    DiffusionBundle fresh = make_bundle(store.manifest, diffusion_config(cfg), init);
    DiffusionTrainOptions opts;
    opts.epochs = cfg.diffusion_epochs;
    opts.batch_size = cfg.diffusion_batch;
    opts.lr = cfg.diffusion_lr;
    opts.patience = cfg.diffusion_patience;
    RngStream rng(seed, 101 + salt);
    const auto history = train_diffusion(fresh, store, opts, rng);
    log("train-diffusion: loss " + format_double(history.front()) + " -> " +
        format_double(history.back()) + " over " + std::to_string(history.size()) + " epochs");
    save_dir(dir / "diffusion", [&](const fs::path& d) { save_bundle(d, fresh); });
    timings.record(tag + "train-diffusion", seconds_since(t0));
    return fresh;
  });
  if (until == Stage::Diffusion) return std::nullopt;

  ScaleModel scale = stage_guard(tag + "train-scale", [&] {
    if (fs::exists(dir / "scale")) return load_scale(dir / "scale");
    log("train-scale: layer " + std::to_string(layer));
    const auto t0 = std::chrono::steady_clock::now();
    RngStream rng(seed, 102 + salt);
    const auto res = train_scale(store,
                                 {cfg.scale_hidden, cfg.scale_epochs, cfg.scale_batch, cfg.scale_lr,
                                  cfg.scale_clip},
                                 rng);
    log("train-scale: loss " + format_double(res.history.front()) + " dB -> " +
        format_double(res.history.back()) + " dB");
    save_dir(dir / "scale", [&](const fs::path& d) { save_scale(d, res.model); });
    timings.record(tag + "train-scale", seconds_since(t0));
    return res.model;
  });
  return LayerHead{layer, std::move(store), std::move(bundle), std::move(scale)};
}

SeedResult evaluate_seed(const PipelineConfig& cfg, std::uint64_t seed, const MlpModel& base,
                         const Dataset& test, LayerHead& head, LayerHead* alt) {
  SeedResult r;
  r.seed = seed;
  r.layer = head.layer;
  if (alt) r.alt_layer = alt->layer;
  LabelAudit audit(test);
  const TestView view{test.inputs, audit};
  const FinetuneOptions fo = finetune_options(cfg);

  const bool need_draws = cfg.wants("ocd") || cfg.wants("ocd_no_scale");
  const int k = cfg.wants("ocd") && !cfg.ensemble_modes.empty() ? cfg.ensemble_k : 1;
  std::vector<std::vector<Matrix>> draws;
  std::vector<double> rho;
  if (need_draws) {
    draws = draw_deltas(head.bundle, base, view, k, seed);
    rho = predict_rho(head.scale, base, head.layer, view);
  }
  const auto first_draw = [&] {
    std::vector<Matrix> d;
    for (const auto& per : draws) d.push_back(per[0]);
    return d;
  };

  for (const auto& v : kVariants) {
    if (!cfg.wants(v)) continue;
    if (v == "base") {
      r.rows.emplace_back(v, score(predict_base(base, view), test));
    } else if (v == "ocd") {
      r.rows.emplace_back(v, score(predict_shifted(base, head.layer, view, first_draw(), rho), test));
      if (cfg.ensemble_modes.empty()) continue;
      VariantMetrics mean{0.0, cfg.classification() ? std::optional<double>(0.0) : std::nullopt};
      for (int j = 0; j < k; ++j) {
        std::vector<Matrix> dj;
        for (const auto& per : draws) dj.push_back(per[static_cast<std::size_t>(j)]);
        const auto m = score(predict_shifted(base, head.layer, view, dj, rho), test);
        mean.loss += m.loss / k;
        if (mean.accuracy) *mean.accuracy += *m.accuracy / k;
      }
      r.rows.emplace_back("ocd_single_draw_mean", mean);
      for (const auto& mode : cfg.ensemble_modes) {
        const auto pred = mode == "logit_avg" ? ensemble_logit_avg(base, head.layer, view, draws, rho, k)
                                              : ensemble_weight_avg(base, head.layer, view, draws, rho, k);
        r.rows.emplace_back("ocd_ens_" + mode, score(pred, test));
      }
      int min_distinct = k;
      for (const auto& per : draws) {
        std::vector<const Matrix*> uniq;
        for (const auto& d : per) {
          if (std::none_of(uniq.begin(), uniq.end(), [&](const Matrix* u) { return *u == d; })) {
            uniq.push_back(&d);
          }
        }
        min_distinct = std::min(min_distinct, static_cast<int>(uniq.size()));
      }
      r.min_distinct_draws = min_distinct;
    } else if (v == "ocd_no_scale") {
      const std::vector<double> bar(draws.size(), head.store.mean_rho());
      r.rows.emplace_back(v, score(predict_shifted(base, head.layer, view, first_draw(), bar), test));
    } else if (v == "nearest_neighbor") {
      r.rows.emplace_back(v, score(predict_nearest_neighbor(base, head, view), test));
    } else if (v == "alt_layer") {
      const auto alt_draws = draw_deltas(alt->bundle, base, view, 1, seed);
      std::vector<Matrix> d;
      for (const auto& per : alt_draws) d.push_back(per[0]);
      const auto alt_rho = predict_rho(alt->scale, base, alt->layer, view);
      r.rows.emplace_back(v, score(predict_shifted(base, alt->layer, view, d, alt_rho), test));
    } else if (v == "overfit_on_test") {
      r.rows.emplace_back(v, score(predict_overfit_on_test(base, head.layer, fo, view, v), test));
    } else if (v == "overfit_on_test_all") {
      r.rows.emplace_back(v, score(predict_overfit_on_test(base, std::nullopt, fo, view, v), test));
    }
  }
  r.label_reads = audit.reads();
  return r;
}

}  // namespace

std::optional<SeedResult> run_seed(const PipelineConfig& cfg, const RunPaths& paths, std::uint64_t seed,
                                   const RunOptions& opts) {
  const Log log{opts.verbose, seed};
  fs::create_directories(paths.seed_dir(seed));
  Timings timings(paths.timings(seed));

  if (opts.until == Stage::Eval && fs::exists(paths.metrics(seed))) {
    SeedResult r = seed_result_from_json(read_text(paths.metrics(seed)));
    r.seconds = timings.seconds();
    return r;
  }

  const Splits data = stage_guard("data", [&] { return make_data(cfg, seed); });

  const MlpModel base = stage_guard("train-base", [&] {
    if (fs::exists(paths.base(seed))) return load_model(paths.base(seed));
    log("train-base: " + std::to_string(data.train.size()) + " training samples");
    const auto t0 = std::chrono::steady_clock::now();
    RngStream rng(seed, 1);
    MlpModel m = init_mlp(base_spec(cfg, data.train), rng);
    train_mlp(m, data.train, {cfg.base_epochs, cfg.base_batch, cfg.base_lr}, rng);
    save_dir(paths.base(seed), [&](const fs::path& d) { save_model(d, m, "base", seed); });
    timings.record("train-base", seconds_since(t0));
    return m;
  });
  if (opts.until == Stage::Base) return std::nullopt;

  const LayerScoreReport layers = stage_guard("select-layer", [&] {
    if (fs::exists(paths.layers(seed))) return LayerScoreReport::from_csv(read_text(paths.layers(seed)));
    log("select-layer: " + std::to_string(cfg.select_draws) + " draws per sample");
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> idx;
    for (Index i = 0; i < std::min(cfg.select_subset, data.train.size()); ++i) {
      idx.push_back(static_cast<std::size_t>(i));
    }
    auto rep = select_layer(base, data.train.subset(idx), {cfg.select_draws, cfg.select_sigma, seed});
    write_text(paths.layers(seed), rep.to_csv());
    timings.record("select-layer", seconds_since(t0));
    log("select-layer: layer " + std::to_string(rep.selected));
    return rep;
  });
  if (opts.until == Stage::Select) return std::nullopt;

  const bool want_alt = cfg.wants("alt_layer");
  if (want_alt && !layers.runner_up) {
    throw StageError("alt_layer", "the base model has a single layer, so there is no runner-up");
  }
  auto head = run_head(cfg, paths, seed, base, data.train, layers.selected, "", opts.until, timings, log);
  std::optional<LayerHead> alt;
  if (want_alt) {
    alt = run_head(cfg, paths, seed, base, data.train, *layers.runner_up, "alt_", opts.until, timings, log);
  }
  if (opts.until != Stage::Eval) return std::nullopt;

  SeedResult r = stage_guard("eval", [&] {
    log("eval: " + std::to_string(data.test.size()) + " test samples");
    const auto t0 = std::chrono::steady_clock::now();
    SeedResult res = evaluate_seed(cfg, seed, base, data.test, *head, alt ? &*alt : nullptr);
    timings.record("eval", seconds_since(t0));
    write_text(paths.metrics(seed), seed_result_to_json(res));
    return res;
  });
  r.seconds = timings.seconds();
  return r;
}

// --------------------------------------------------------------- persistence

std::string seed_result_to_json(const SeedResult& r) {
  json j;
  j["seed"] = r.seed;
  j["layer"] = r.layer;
  j["alt_layer"] = r.alt_layer ? json(*r.alt_layer) : json(nullptr);
  j["min_distinct_draws"] = r.min_distinct_draws;
  j["label_reads"] = r.label_reads;
  j["rows"] = json::array();
  for (const auto& [name, m] : r.rows) {
    json row{{"variant", name}, {"loss", m.loss}};
    row["accuracy"] = m.accuracy ? json(*m.accuracy) : json(nullptr);
    j["rows"].push_back(row);
  }
  return j.dump(2) + "\n";
}

SeedResult seed_result_from_json(const std::string& text) {
  SeedResult r;
  try {
    const json j = json::parse(text);
    r.seed = j.at("seed").get<std::uint64_t>();
    r.layer = j.at("layer").get<Index>();
    if (!j.at("alt_layer").is_null()) r.alt_layer = j.at("alt_layer").get<Index>();
    r.min_distinct_draws = j.at("min_distinct_draws").get<int>();
    r.label_reads = j.at("label_reads").get<std::map<std::string, std::size_t>>();
    for (const auto& row : j.at("rows")) {
      VariantMetrics m;
      m.loss = row.at("loss").get<double>();
      if (!row.at("accuracy").is_null()) m.accuracy = row.at("accuracy").get<double>();
      r.rows.emplace_back(row.at("variant").get<std::string>(), m);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("seed metrics: ") + e.what());
  }
  return r;
}

// ------------------------------------------------------------------ reports

std::string format_double(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

const MetricRow* EvalReport::find(const std::string& variant, const std::string& metric) const {
  for (const auto& r : rows) {
    if (r.variant == variant && r.metric == metric) return &r;
  }
  return nullptr;
}

EvalReport build_report(const PipelineConfig& cfg, const std::vector<SeedResult>& results) {
  EvalReport rep;
  rep.config_hash = cfg.hash();
  rep.config_text = cfg.canonical();
  for (const auto& r : results) rep.seeds.push_back(r.seed);
  const std::string loss_name = cfg.classification() ? "CE" : "MSE";

  const auto aggregate = [&](const std::string& variant, const std::string& metric,
                             std::vector<double> vals) {
    MetricRow row{variant, metric, std::move(vals), 0.0, std::nullopt};
    for (double v : row.per_seed) row.mean += v;
    row.mean /= static_cast<double>(row.per_seed.size());
    if (row.per_seed.size() >= 2) {
      double ss = 0.0;
      for (double v : row.per_seed) ss += (v - row.mean) * (v - row.mean);
      row.sd = std::sqrt(ss / static_cast<double>(row.per_seed.size() - 1));
    }
    rep.rows.push_back(std::move(row));
  };

  for (const auto& name : report_row_names(cfg)) {
    std::vector<double> loss, acc;
    for (const auto& r : results) {
      const VariantMetrics* m = r.find(name);
      if (!m) throw FormatError("seed " + std::to_string(r.seed) + " has no result for " + name);
      loss.push_back(m->loss);
      if (m->accuracy) acc.push_back(*m->accuracy);
    }
    aggregate(name, loss_name, loss);
    if (acc.size() == results.size() && !acc.empty()) aggregate(name, "accuracy", acc);
  }

  std::vector<std::string> stages;
  for (const auto& r : results) {
    for (const auto& [stage, s] : r.seconds) {
      if (std::find(stages.begin(), stages.end(), stage) == stages.end()) stages.push_back(stage);
    }
  }
  const std::vector<std::string> order{"train-base",          "select-layer",        "collect",
                                       "train-diffusion",     "train-scale",         "alt_collect",
                                       "alt_train-diffusion", "alt_train-scale",     "eval"};
  std::stable_sort(stages.begin(), stages.end(), [&](const std::string& a, const std::string& b) {
    return std::find(order.begin(), order.end(), a) < std::find(order.begin(), order.end(), b);
  });
  for (const auto& stage : stages) {
    TimingRow t{stage, {}};
    for (const auto& r : results) {
      const auto it = r.seconds.find(stage);
      t.per_seed.push_back(it == r.seconds.end() ? 0.0 : it->second);
    }
    rep.timings.push_back(std::move(t));
  }
  return rep;
}

std::string EvalReport::to_csv() const {
  std::string out = "config_hash,variant,metric,mean,sd";
  for (auto s : seeds) out += ",seed_" + std::to_string(s);
  out += "\r\n";
  for (const auto& r : rows) {
    out += csv_field(config_hash) + "," + csv_field(r.variant) + "," + csv_field(r.metric) + "," +
           format_double(r.mean) + "," + (r.sd ? format_double(*r.sd) : "");
    for (double v : r.per_seed) out += "," + format_double(v);
    out += "\r\n";
  }
  return out;
}

std::string EvalReport::timings_csv() const {
  std::string out = "config_hash,stage";
  for (auto s : seeds) out += ",seed_" + std::to_string(s);
  out += "\r\n";
  for (const auto& t : timings) {
    out += csv_field(config_hash) + "," + csv_field(t.stage);
    for (double v : t.per_seed) out += "," + format_double(v);
    out += "\r\n";
  }
  return out;
}

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

std::string pm(const MetricRow* r, double mul, int digits) {
  if (!r) return "";
  std::string s = fixed(r->mean * mul, digits);
  if (r->sd) s += " ± " + fixed(*r->sd * mul, digits);
  return s;
}

}  // namespace

std::string EvalReport::to_markdown() const {
  std::ostringstream md;
  md << "# OCD evaluation report\n\n";
  md << "Config hash `" << config_hash << "`, seeds";
  for (auto s : seeds) md << " " << s;
  md << ". Mean ± sample SD over seeds.\n\n";

  std::vector<std::string> variants;
  std::string loss_name;
  bool has_acc = false;
  for (const auto& r : rows) {
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    if (r.metric == "accuracy") {
      has_acc = true;
    } else {
      loss_name = r.metric;
    }
  }
  md << "| Variant | Test " << loss_name << " |" << (has_acc ? " Accuracy (%) |" : "") << "\n";
  md << "|---|---|" << (has_acc ? "---|" : "") << "\n";
  for (const auto& v : variants) {
    md << "| " << v << " | " << pm(find(v, loss_name), 1.0, 4) << " |";
    if (has_acc) md << " " << pm(find(v, "accuracy"), 100.0, 2) << " |";
    md << "\n";
  }

  md << "\n## Wall clock (s)\n\n| Stage |";
  for (auto s : seeds) md << " seed " << s << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < seeds.size(); ++i) md << "---|";
  md << "\n";
  for (const auto& t : timings) {
    md << "| " << t.stage << " |";
    for (double v : t.per_seed) md << " " << fixed(v, 2) << " |";
    md << "\n";
  }
  md << "\n## Configuration\n\n```\n" << config_text << "```\n";
  return md.str();
}

void emit_report(const EvalReport& report, const fs::path& dir) {
  write_text(dir / "report.csv", report.to_csv());
  write_text(dir / "timings.csv", report.timings_csv());
  write_text(dir / "report.md", report.to_markdown());
}

EvalReport run_pipeline(const PipelineConfig& cfg, const fs::path& root, bool verbose) {
  cfg.validate();
  const RunPaths paths = run_paths(root, cfg);
  fs::create_directories(paths.dir);
  write_text(paths.dir / "config.txt", cfg.canonical());
  std::vector<SeedResult> results;
  for (auto seed : cfg.seeds) results.push_back(*run_seed(cfg, paths, seed, {Stage::Eval, verbose}));
  EvalReport rep = build_report(cfg, results);
  emit_report(rep, paths.dir);
  return rep;
}

EvalReport report_from_disk(const PipelineConfig& cfg, const fs::path& root) {
  const RunPaths paths = run_paths(root, cfg);
  std::vector<SeedResult> results;
  for (auto seed : cfg.seeds) {
    if (!fs::exists(paths.metrics(seed))) {
      throw StageError("report", "no metrics for seed " + std::to_string(seed) + " in " + paths.dir.string() +
                                     "; run eval first");
    }
    SeedResult r = seed_result_from_json(read_text(paths.metrics(seed)));
    r.seconds = Timings(paths.timings(seed)).seconds();
    results.push_back(std::move(r));
  }
  EvalReport rep = build_report(cfg, results);
  emit_report(rep, paths.dir);
  return rep;
}

}  // namespace ocd
