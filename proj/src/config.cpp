#include "ocd/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ocd/mlp.hpp"

namespace ocd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || end != t.data() + t.size() || t.empty()) {
    throw ConfigError(key + ": cannot parse '" + text + "'");
  }
  return v;
}

std::string format(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
std::string format(long v) { return std::to_string(v); }
std::string format(int v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
std::string format(std::uint64_t v) { return std::to_string(v); }
template <class T>
std::string format(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += format(v[i]);
  }
  return out;
}

void parse_into(const std::string& key, const std::string& text, double& v) {
  v = parse_number<double>(key, text);
}
void parse_into(const std::string& key, const std::string& text, long& v) {
  v = parse_number<long>(key, text);
}
void parse_into(const std::string& key, const std::string& text, int& v) {
  v = parse_number<int>(key, text);
}
void parse_into(const std::string& key, const std::string& text, std::uint64_t& v) {
  v = parse_number<std::uint64_t>(key, text);
}
void parse_into(const std::string& key, const std::string& text, bool& v) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "on") {
    v = true;
  } else if (t == "false" || t == "0" || t == "off") {
    v = false;
  } else {
    throw ConfigError(key + ": expected true/false, got '" + text + "'");
  }
}
void parse_into(const std::string&, const std::string& text, std::string& v) { v = trim(text); }
template <class T>
void parse_into(const std::string& key, const std::string& text, std::vector<T>& v) {
  v.clear();
  for (const auto& item : split_list(text)) {
    T x{};
    parse_into(key, item, x);
    v.push_back(x);
  }
}

template <class T>
ConfigKey field(std::string name, T PipelineConfig::*member, std::string help) {
  return {name, std::move(help),
          [name, member](PipelineConfig& c, const std::string& text) { parse_into(name, text, c.*member); },
          [member](const PipelineConfig& c) { return format(c.*member); }};
}

std::vector<ConfigKey> build_keys() {
  using C = PipelineConfig;
  return {
      field("dataset", &C::dataset, "blobs | tabular | csv | idx"),
      field("n", &C::n, "number of generated samples"),
      field("classes", &C::classes, "blob classes"),
      field("spread", &C::spread, "blob standard deviation"),
      field("dim", &C::dim, "input dimension of generated data"),
      field("noise", &C::noise, "tabular target noise std"),
      field("csv_path", &C::csv_path, "CSV file for dataset=csv"),
      field("csv_target", &C::csv_target, "target column for dataset=csv"),
      field("idx_images", &C::idx_images, "IDX image file for dataset=idx"),
      field("idx_labels", &C::idx_labels, "IDX label file for dataset=idx"),
      field("split_train", &C::split_train, "train fraction"),
      field("split_val", &C::split_val, "validation fraction"),
      field("split_test", &C::split_test, "test fraction"),
      field("seeds", &C::seeds, "comma-separated seeds, one repetition each"),
      field("hidden", &C::hidden, "base MLP hidden sizes"),
      field("activation", &C::activation, "tanh | relu"),
      field("base_epochs", &C::base_epochs, "base model epochs"),
      field("base_batch", &C::base_batch, "base model batch size"),
      field("base_lr", &C::base_lr, "base model Adam learning rate"),
      field("select_subset", &C::select_subset, "training samples scored by layer selection"),
      field("select_draws", &C::select_draws, "perturbation draws per sample"),
      field("select_sigma", &C::select_sigma, "perturbation std relative to layer RMS"),
      field("finetune_steps", &C::finetune_steps, "gradient steps per sample"),
      field("finetune_lr", &C::finetune_lr, "per-sample gradient descent step"),
      field("diffusion_T", &C::diffusion_T, "diffusion steps"),
      field("cond_dim", &C::cond_dim, "conditioning width (even)"),
      field("channels", &C::channels, "U-Net base channels"),
      field("levels", &C::levels, "U-Net resolution levels"),
      field("attention", &C::attention, "bottleneck self-attention"),
      field("spatial_hidden", &C::spatial_hidden, "hidden width of the spatial conditioning map"),
      field("diffusion_batch", &C::diffusion_batch, "diffusion batch size"),
      field("diffusion_epochs", &C::diffusion_epochs, "diffusion epochs"),
      field("diffusion_lr", &C::diffusion_lr, "diffusion Adam learning rate"),
      field("diffusion_patience", &C::diffusion_patience, "epochs without improvement before stopping"),
      field("scale_hidden", &C::scale_hidden, "scale MLP hidden sizes"),
      field("scale_epochs", &C::scale_epochs, "scale model epochs"),
      field("scale_batch", &C::scale_batch, "scale model batch size"),
      field("scale_lr", &C::scale_lr, "scale model Adam learning rate"),
      field("scale_clip", &C::scale_clip, "per-record bound on d loss / d log rho (0: off)"),
      field("variants", &C::variants, "variants to evaluate"),
      field("ensemble_k", &C::ensemble_k, "draws per test sample for ensembles"),
      field("ensemble_modes", &C::ensemble_modes, "logit_avg, weight_avg (empty: none)"),
  };
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + ": " + what);
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

bool PipelineConfig::wants(const std::string& variant) const { return contains(variants, variant); }

void PipelineConfig::validate() const {
  require(dataset == "blobs" || dataset == "tabular" || dataset == "csv" || dataset == "idx",
          "dataset", "expected blobs, tabular, csv or idx, got '" + dataset + "'");
  require(n >= 20, "n", "need at least 20 samples");
  if (dataset == "blobs") require(classes >= 2, "classes", "need at least 2");
  require(spread >= 0.0, "spread", "must be >= 0");
  require(dim >= (dataset == "blobs" ? 2 : 1), "dim", "too small");
  require(noise >= 0.0, "noise", "must be >= 0");
  if (dataset == "csv") {
    require(!csv_path.empty(), "csv_path", "required for dataset=csv");
    require(!csv_target.empty(), "csv_target", "required for dataset=csv");
  }
  if (dataset == "idx") {
    require(!idx_images.empty(), "idx_images", "required for dataset=idx");
    require(!idx_labels.empty(), "idx_labels", "required for dataset=idx");
  }
  require(split_train > 0 && split_val >= 0 && split_test > 0, "split_train",
          "fractions must be positive (validation may be 0)");
  require(std::abs(split_train + split_val + split_test - 1.0) < 1e-9, "split_train",
          "fractions must sum to 1");
  require(!seeds.empty(), "seeds", "need at least one seed");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds",
          "seeds must be distinct");
  require(!hidden.empty(), "hidden", "need at least one hidden layer");
  for (Index h : hidden) require(h >= 1, "hidden", "sizes must be positive");
  require(activation == "tanh" || activation == "relu", "activation", "expected tanh or relu");
  require(base_epochs >= 1, "base_epochs", "must be >= 1");
  require(base_batch >= 1, "base_batch", "must be >= 1");
  require(base_lr > 0, "base_lr", "must be > 0");
  require(select_subset >= 1, "select_subset", "must be >= 1");
  require(select_draws >= 2, "select_draws", "must be >= 2");
  require(select_sigma > 0, "select_sigma", "must be > 0");
  require(finetune_steps >= 1, "finetune_steps", "must be >= 1");
  require(finetune_lr > 0, "finetune_lr", "must be > 0");
  require(diffusion_T >= 2, "diffusion_T", "must be >= 2");
  require(cond_dim >= 2 && cond_dim % 2 == 0, "cond_dim", "must be even and >= 2");
  require(channels >= 1, "channels", "must be >= 1");
  require(levels >= 0 && levels <= 4, "levels", "must be in 0..4");
  require(spatial_hidden >= 1, "spatial_hidden", "must be >= 1");
  require(diffusion_batch >= 1, "diffusion_batch", "must be >= 1");
  require(diffusion_epochs >= 1, "diffusion_epochs", "must be >= 1");
  require(diffusion_lr > 0, "diffusion_lr", "must be > 0");
  require(diffusion_patience >= 1, "diffusion_patience", "must be >= 1");
  for (Index h : scale_hidden) require(h >= 1, "scale_hidden", "sizes must be positive");
  require(scale_epochs >= 1, "scale_epochs", "must be >= 1");
  require(scale_batch >= 1, "scale_batch", "must be >= 1");
  require(scale_lr > 0, "scale_lr", "must be > 0");
  require(scale_clip >= 0, "scale_clip", "must be >= 0");
  require(!variants.empty(), "variants", "need at least one variant");
  for (const auto& v : variants) require(contains(kVariants, v), "variants", "unknown variant '" + v + "'");
  require(ensemble_k >= 1, "ensemble_k", "must be >= 1");
  for (const auto& m : ensemble_modes) {
    require(contains(kEnsembleModes, m), "ensemble_modes", "unknown mode '" + m + "'");
  }
}

std::string PipelineConfig::canonical() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

std::string PipelineConfig::hash() const { return fnv1a_hex(canonical()); }

std::vector<std::string> preset_names() { return {"blobs", "tabular", "smoke", "smoke-tabular"}; }

PipelineConfig preset_config(const std::string& name) {
  PipelineConfig c;
  if (name == "blobs") return c;
  if (name == "tabular" || name == "smoke-tabular") {
    c.dataset = "tabular";
    c.n = 5000;
    c.dim = 8;
    c.noise = 0.1;
    c.hidden = {8, 8, 8};
    c.finetune_lr = 1e-2;
    c.diffusion_lr = 3e-3;
  } else if (name != "smoke") {
    throw ConfigError("preset: unknown preset '" + name + "'");
  }
  if (name == "smoke" || name == "smoke-tabular") {
    c.n = 400;
    c.seeds = {42, 43};
    c.select_draws = 1000;
    c.select_subset = 16;
    c.diffusion_epochs = 2;
    c.scale_epochs = 2;
    c.ensemble_k = 3;
  }
  return c;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' repeated");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

PipelineConfig resolve_config(const std::vector<std::pair<std::string, std::string>>& file_entries,
                              const std::vector<std::pair<std::string, std::string>>& flag_entries) {
  std::string preset = "blobs";
  for (const auto* entries : {&file_entries, &flag_entries}) {
    for (const auto& [k, v] : *entries) {
      if (k == "preset") preset = v;
    }
  }
  PipelineConfig cfg = preset_config(preset);
  for (const auto* entries : {&file_entries, &flag_entries}) {
    for (const auto& [k, v] : *entries) {
      if (k != "preset") set_config_value(cfg, k, v);
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return resolve_config(parse_config_text(ss.str()), {});
}

}  // namespace ocd
