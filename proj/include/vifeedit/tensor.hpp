#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace vifeedit {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Raised when an operation produces NaN or Inf. The message names the op.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of scalars. Immutable by convention once handed to
/// the autograd graph; kernels write into freshly allocated outputs.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Array::Zero(shape_numel(shape_));
  }

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                       " elements but shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Array(Eigen::Map<const Array>(
                                     values.begin(), static_cast<Index>(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor scalar(Scalar value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return data_.size(); }

  /// Extent of axis `axis`; negative values count from the back.
  Index dim(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                       shape_string(shape_));
    }
    return shape_[static_cast<std::size_t>(a)];
  }

  Array& data() { return data_; }
  const Array& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Scalar value of a one-element tensor.
  Scalar item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  /// View the buffer as a rows x cols row-major matrix (rows*cols == size()).
  MatrixMap matrix(Index rows, Index cols) { return MatrixMap(ptr(), rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    return ConstMatrixMap(ptr(), rows, cols);
  }

  /// Collapse all leading axes: [..., n] -> (prod(...), n).
  MatrixMap rows_view() { return matrix(size() / dim(-1), dim(-1)); }
  ConstMatrixMap rows_view() const { return matrix(size() / dim(-1), dim(-1)); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  // x - x is 0 for finite x and NaN otherwise; this vectorizes, allFinite does not.
  bool all_finite() const { return (data_ - data_).sum() == Scalar(0); }

  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (size() == 0 || std::equal(ptr(), ptr() + size(), other.ptr(),
                                      [](Scalar a, Scalar b) {
                                        return std::memcmp(&a, &b, sizeof(Scalar)) == 0;
                                      }));
  }

  Scalar max_abs_diff(const Tensor& other) const {
    if (shape_ != other.shape_) {
      throw ShapeError("max_abs_diff shape mismatch " + shape_string(shape_) + " vs " +
                       shape_string(other.shape_));
    }
    return size() == 0 ? Scalar(0) : (data_ - other.data_).abs().maxCoeff();
  }

 private:
  void validate_shape() const {
    for (Index e : shape_) {
      if (e < 1) throw ShapeError("extents must be >= 1, got shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  Array data_;
};

/// Throws NonFiniteError naming `op` when `t` holds NaN or Inf.
template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const std::string& op) {
  if (!t.all_finite()) {
    throw NonFiniteError("non-finite value produced by '" + op + "' (shape " +
                         shape_string(t.shape()) + ")");
  }
}

}  // namespace vifeedit
