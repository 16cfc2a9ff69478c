#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <tuple>
#include <vector>

#include "ocd/loss.hpp"
#include "ocd/tensor.hpp"

namespace ocd {

enum class TaskKind { Classification, Regression };

struct Dataset {
  TaskKind task = TaskKind::Classification;
  int num_classes = 0;             // classification only
  Matrix inputs;                   // n x d
  std::vector<int> labels;         // classification
  Matrix targets;                  // n x k, regression
  Vector feature_mean;             // statistics the inputs were standardized with
  Vector feature_std;              // (zeros / ones when raw)
  std::vector<std::size_t> source_index;  // row -> row of the originating dataset

  Index size() const { return inputs.rows(); }
  Index dim() const { return inputs.cols(); }
  Index target_dim() const {
    return task == TaskKind::Classification ? num_classes : targets.cols();
  }
  Vector input(Index i) const { return inputs.row(i).transpose(); }
  Target target(Index i) const;

  /// Rows `idx` in order; statistics and task metadata carried over.
  Dataset subset(const std::vector<std::size_t>& idx) const;
};

/// Gaussian blobs: class c centered on a circle of radius 3 in the first two
/// coordinates, points = center + spread * N(0, I). Labels are balanced.
Dataset gen_blobs(std::uint64_t seed, Index n, int num_classes, double spread,
                  Index dim = 2);

/// y = sum_j sin(w_j . x) + noise, x ~ N(0, I_d), w_j ~ N(0, (1.5/d) I).
struct TabularTask {
  Matrix frequencies;  // terms x d
  double noise_std = 0.0;

  static TabularTask make(std::uint64_t seed, Index dim, double noise_std,
                          Index terms = 4);
  double clean_target(const Vector& x) const;
  /// Var(y) for x ~ N(0, I), in closed form.
  double analytic_variance() const;
};

Dataset gen_tabular_reg(std::uint64_t seed, Index n, Index dim, double noise_std);

/// Numeric CSV with a header row; `target_column` becomes the regression
/// target, every other column a feature. Raw (unstandardized) values.
Dataset load_csv_table(const std::filesystem::path& path,
                       const std::string& target_column);

/// IDX images (magic 0x00000803) and labels (0x00000801), first `limit`
/// items, pixels scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images,
                 const std::filesystem::path& labels, std::size_t limit);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train, val, test;
};

/// Shuffles, partitions, then standardizes all three parts with statistics
/// computed on the train part only.
Splits split(const Dataset& data, const SplitSpec& spec);

struct Standardizer {
  Vector mean;
  Vector std;  // population std; constant columns keep 1
};
Standardizer fit_standardizer(const Matrix& inputs);
Matrix apply_standardizer(const Standardizer& s, const Matrix& inputs);

}  // namespace ocd
