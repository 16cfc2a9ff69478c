#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ocd/error.hpp"

namespace ocd {

using Index = Eigen::Index;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMajorMat =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vector = Vec<double>;
using Matrix = Mat<double>;

/// Dense row-major array with an explicit shape.
///
/// Storage is a flat Eigen vector so that element-wise math stays in Eigen
/// expressions; 2-D tensors can be viewed as row-major matrices.
template <typename Scalar>
class Tensor {
 public:
  using Shape = std::vector<Index>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.setZero(checked_size(shape_));
  }

  Tensor(Shape shape, Vec<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape product " +
                           std::to_string(checked_size(shape_)) +
                           " does not match data length " +
                           std::to_string(data_.size()));
    }
  }

  /// Copies a matrix in row-major element order.
  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    RowMajorMat<Scalar> rm = m;
    Vec<Scalar> flat = Eigen::Map<const Vec<Scalar>>(rm.data(), rm.size());
    return Tensor({m.rows(), m.cols()}, std::move(flat));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }

  Vec<Scalar>& data() { return data_; }
  const Vec<Scalar>& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Eigen::Map<RowMajorMat<Scalar>> matrix() {
    require_rank2();
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const RowMajorMat<Scalar>> matrix() const {
    require_rank2();
    return {data_.data(), shape_[0], shape_[1]};
  }

  /// Column-major copy, for code that works with plain Eigen matrices.
  Mat<Scalar> to_matrix() const { return matrix(); }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static Index checked_size(const Shape& shape) {
    Index n = 1;
    for (Index s : shape) {
      if (s < 0) throw DimensionError("negative tensor extent");
      n *= s;
    }
    return n;
  }

  void require_rank2() const {
    if (shape_.size() != 2) {
      throw DimensionError("matrix view requires a rank-2 tensor, got rank " +
                           std::to_string(shape_.size()));
    }
  }

  Shape shape_;
  Vec<Scalar> data_;
};

using TensorF = Tensor<double>;

}  // namespace ocd
