#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace fedcsap {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::string to_string(const Shape& shape);
Index shape_size(const Shape& shape);

/// Dense row-major array of doubles.
///
/// The gradient buffer exists only when requires_grad() is set and always has
/// the same extent as the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Vector data);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor constant(Shape shape, double value);
  static Tensor from_matrix(const RowMatrix& m);
  static Tensor from_vector(const Vector& v);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index size() const { return data_.size(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  /// Scalar value of a single-element tensor.
  double item() const;

  /// Rank-2 view. Rank-1 tensors are viewed as a single row.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  Vector& grad();
  const Vector& grad() const;
  void zero_grad();

  Tensor reshaped(Shape shape) const;
  bool all_finite() const { return data_.allFinite(); }

  /// Bitwise equality of shape and data.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  Vector data_;
  Vector grad_;
  bool requires_grad_ = false;
};

}  // namespace fedcsap
