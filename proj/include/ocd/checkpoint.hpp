#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "ocd/mlp.hpp"
#include "ocd/tensor.hpp"

namespace ocd {

/// A checkpoint directory: `manifest.json` with free-form metadata plus one
/// raw little-endian float64 file per tensor (row-major), listed by name.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, TensorF> tensors;

  const TensorF& tensor(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_raw_f64(const std::filesystem::path& file, const Vector& data);
Vector read_raw_f64(const std::filesystem::path& file, Index expected);

nlohmann::json spec_to_json(const MlpSpec& spec);
MlpSpec spec_from_json(const nlohmann::json& j);

/// Stores the model under `prefix` (spec in meta, W/b tensors).
void put_model(Checkpoint& ckpt, const std::string& prefix, const MlpModel& model);
MlpModel get_model(const Checkpoint& ckpt, const std::string& prefix);

void save_model(const std::filesystem::path& dir, const MlpModel& model,
                const std::string& stage, std::uint64_t seed);
MlpModel load_model(const std::filesystem::path& dir);

}  // namespace ocd
