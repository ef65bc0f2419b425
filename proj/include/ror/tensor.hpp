#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ror/error.hpp"

namespace ror {

using Index = Eigen::Index;

/// Extents of a dense tensor. Images use batch x channels x height x width.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims) : Shape(std::vector<Index>(dims)) {}
  explicit Shape(std::vector<Index> dims) : dims_(std::move(dims)) {
    for (Index d : dims_) {
      if (d <= 0) throw ConfigError("tensor extents must be positive, got " + str());
    }
  }

  std::size_t rank() const { return dims_.size(); }
  Index operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<Index>& dims() const { return dims_; }

  Index numel() const {
    Index n = 1;
    for (Index d : dims_) n *= d;
    return dims_.empty() ? 0 : n;
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::vector<Index> dims_;
};

/// Dense row-major tensor backed by an Eigen column array.
template <typename Scalar>
class Tensor {
 public:
  using Values = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), values_(Values::Constant(shape_.numel(), fill)) {}
  Tensor(Shape shape, Values values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_.numel()) {
      throw ConfigError("tensor value count " + std::to_string(values_.size()) +
                        " does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }

  const Shape& shape() const { return shape_; }
  Index size() const { return values_.size(); }
  Index dim(std::size_t i) const { return shape_[i]; }
  bool empty() const { return values_.size() == 0; }

  Values& values() { return values_; }
  const Values& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar& at(Index r, Index c) { return values_[r * shape_[1] + c]; }
  Scalar at(Index r, Index c) const { return values_[r * shape_[1] + c]; }

  /// Row-major 2-D view over the first dim x remaining dims.
  Eigen::Map<RowMatrix> matrix(Index rows, Index cols) {
    return Eigen::Map<RowMatrix>(data(), rows, cols);
  }
  Eigen::Map<const RowMatrix> matrix(Index rows, Index cols) const {
    return Eigen::Map<const RowMatrix>(data(), rows, cols);
  }

  bool all_finite() const { return values_.isFinite().all(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

 private:
  Shape shape_;
  Values values_;
};

}  // namespace ror
