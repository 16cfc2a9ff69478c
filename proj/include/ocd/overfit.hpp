#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ocd/datasets.hpp"
#include "ocd/loss.hpp"
#include "ocd/mlp.hpp"

namespace ocd {

/// What the hypernetwork is conditioned on, all taken from the base model.
struct ConditioningTuple {
  Vector layer_input;  // input of layer L
  Vector activation;   // output of layer L (logits when L is the last layer)
  Vector output;       // network output after the head

  friend bool operator==(const ConditioningTuple&, const ConditioningTuple&) = default;
};

ConditioningTuple make_conditioning(const MlpModel& model, Index layer, const Vector& x);

struct FinetuneOptions {
  int steps = 3;
  double lr = 1e-2;
  // Convergence mode: keep stepping (up to max_steps) until the loss moves
  // by less than tol. Off when max_steps == 0.
  int max_steps = 0;
  double tol = 1e-10;
};

struct FinetuneResult {
  MlpModel model;
  double loss_before = 0.0;
  double loss_after = 0.0;
  int steps_taken = 0;
};

/// Plain gradient descent on one sample, updating only `layer`, or every
/// layer when `layer` is empty. Throws NumericalError naming `sample_index`
/// if the loss becomes non-finite.
FinetuneResult finetune_sample(const MlpModel& model, std::optional<Index> layer,
                               const Vector& x, const Target& target,
                               const FinetuneOptions& opts,
                               std::size_t sample_index = 0);

inline constexpr double kMinDeltaNorm = 1e-12;

struct NormalizedDelta {
  Matrix direction;  // unit Frobenius norm, shape of [W | b]
  double scale = 0.0;
};

/// Splits a delta into direction and norm; empty when the norm is at most
/// kMinDeltaNorm.
std::optional<NormalizedDelta> normalize_delta(const Matrix& delta);
std::optional<NormalizedDelta> normalize_delta(const DenseLayer& tuned,
                                               const DenseLayer& base);

struct OverfitRecord {
  std::size_t sample_index = 0;
  Vector x;
  ConditioningTuple cond;
  Matrix delta_norm;
  double rho = 0.0;
  double loss_before = 0.0;
  double loss_after = 0.0;

  friend bool operator==(const OverfitRecord&, const OverfitRecord&) = default;
};

struct RecordManifest {
  Index layer = 0;
  Index input_dim = 0;
  Index layer_in = 0;
  Index layer_out = 0;
  Index output_dim = 0;
  Index num_records = 0;
  Index num_excluded = 0;
  std::string base_checksum;
  int steps = 0;
  double lr = 0.0;

  Index delta_rows() const { return layer_out; }
  Index delta_cols() const { return layer_in + 1; }

  friend bool operator==(const RecordManifest&, const RecordManifest&) = default;
};

struct RecordStore {
  RecordManifest manifest;
  std::vector<OverfitRecord> records;

  /// Throws DimensionError if a record disagrees with the manifest.
  void validate() const;
  /// Mean of rho over all records.
  double mean_rho() const;

  friend bool operator==(const RecordStore&, const RecordStore&) = default;
};

/// Finetunes `layer` on every training sample and keeps the normalized
/// deltas. Records are ordered by sample index.
RecordStore collect(const MlpModel& model, Index layer, const Dataset& train,
                    const FinetuneOptions& opts);

inline constexpr std::size_t kRecordChunk = 1000;

void save_records(const std::filesystem::path& dir, const RecordStore& store);
RecordStore load_records(const std::filesystem::path& dir);

}  // namespace ocd
