#include "fedcsap/numerics/tensor.hpp"

#include <cstring>
#include <sstream>

#include "fedcsap/numerics/errors.hpp"

namespace fedcsap {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (Index e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_ = Vector::Zero(shape_size(shape_));
}

Tensor::Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), Eigen::Map<const Vector>(values.begin(), static_cast<Index>(values.size()))) {}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::constant(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Tensor Tensor::from_vector(const Vector& v) { return Tensor({v.size()}, v); }

Index Tensor::dim(Index axis) const {
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() needs a single-element tensor, got " + to_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix() {
  if (rank() == 1) return MatrixMap(data_.data(), 1, shape_[0]);
  if (rank() != 2) throw DimensionError("matrix view needs rank 1 or 2, got " + to_string(shape_));
  return MatrixMap(data_.data(), shape_[0], shape_[1]);
}

ConstMatrixMap Tensor::matrix() const {
  if (rank() == 1) return ConstMatrixMap(data_.data(), 1, shape_[0]);
  if (rank() != 2) throw DimensionError("matrix view needs rank 1 or 2, got " + to_string(shape_));
  return ConstMatrixMap(data_.data(), shape_[0], shape_[1]);
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_ = Vector::Zero(data_.size());
  } else {
    grad_.resize(0);
  }
}

Vector& Tensor::grad() {
  if (!requires_grad_) throw TapeError("tensor " + to_string(shape_) + " does not require grad");
  return grad_;
}

const Vector& Tensor::grad() const {
  if (!requires_grad_) throw TapeError("tensor " + to_string(shape_) + " does not require grad");
  return grad_;
}

void Tensor::zero_grad() {
  if (requires_grad_) grad_.setZero();
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::identical(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return size() == 0 ||
         std::memcmp(data_.data(), other.data_.data(), static_cast<std::size_t>(size()) * sizeof(double)) == 0;
}

}  // namespace fedcsap
