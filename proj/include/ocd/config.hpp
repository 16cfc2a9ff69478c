#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ocd/tensor.hpp"

namespace ocd {

/// Bad configuration key, value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every knob of a pipeline run. Defaults are the blobs preset.
struct PipelineConfig {
  // data: blobs | tabular | csv | idx
  std::string dataset = "blobs";
  Index n = 4000;
  int classes = 4;
  double spread = 1.0;
  Index dim = 2;
  double noise = 0.1;
  std::string csv_path;
  std::string csv_target;
  std::string idx_images;
  std::string idx_labels;
  double split_train = 0.6;
  double split_val = 0.2;
  double split_test = 0.2;

  std::vector<std::uint64_t> seeds{42, 43, 44};

  // base model
  std::vector<Index> hidden{8, 8};
  std::string activation = "tanh";
  int base_epochs = 10;
  int base_batch = 32;
  double base_lr = 1e-3;

  // layer selection
  Index select_subset = 64;
  int select_draws = 10000;
  double select_sigma = 0.1;  // relative to the layer's RMS

  // per-sample finetune
  int finetune_steps = 3;
  double finetune_lr = 3.0;

  // diffusion
  int diffusion_T = 10;
  Index cond_dim = 32;
  Index channels = 8;
  int levels = 2;
  bool attention = true;
  Index spatial_hidden = 64;
  int diffusion_batch = 32;
  int diffusion_epochs = 25;
  double diffusion_lr = 1e-3;
  int diffusion_patience = 5;

  // scale
  std::vector<Index> scale_hidden{64, 64};
  int scale_epochs = 30;
  int scale_batch = 32;
  double scale_lr = 1e-3;
  double scale_clip = 10.0;

  // evaluation
  std::vector<std::string> variants{"base",      "ocd",           "ocd_no_scale",
                                    "nearest_neighbor", "alt_layer", "overfit_on_test",
                                    "overfit_on_test_all"};
  int ensemble_k = 5;
  std::vector<std::string> ensemble_modes{"logit_avg", "weight_avg"};

  bool classification() const { return dataset == "blobs" || dataset == "idx"; }
  bool wants(const std::string& variant) const;

  /// Throws ConfigError naming the first offending key.
  void validate() const;

  /// One `key = value` line per key, in registry order.
  std::string canonical() const;
  /// FNV-1a of canonical(), 16 hex digits.
  std::string hash() const;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

inline const std::vector<std::string> kVariants{
    "base",      "ocd",           "ocd_no_scale",       "nearest_neighbor",
    "alt_layer", "overfit_on_test", "overfit_on_test_all"};
inline const std::vector<std::string> kEnsembleModes{"logit_avg", "weight_avg"};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

/// All settable keys, in canonical order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key from its text form; throws ConfigError for unknown keys or
/// unparsable values.
void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);

/// Named starting points: blobs, tabular, smoke, smoke-tabular.
PipelineConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

/// `key = value` lines; `#` starts a comment. Throws ConfigError with the
/// line number on malformed lines, unknown or repeated keys.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

/// Defaults, then the preset, then the file's keys, then the flag keys. The
/// preset is taken from the flags if given there, else from the file.
PipelineConfig resolve_config(const std::vector<std::pair<std::string, std::string>>& file_entries,
                              const std::vector<std::pair<std::string, std::string>>& flag_entries);

PipelineConfig load_config_file(const std::filesystem::path& path);

}  // namespace ocd
