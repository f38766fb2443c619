#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rosfl/errors.hpp"

namespace rosfl {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor backed by an Eigen column vector.
///
/// Activations use NCHW layout. Parameters use layer-specific layouts
/// (conv weights are [out, in, kh, kw]). The flat storage makes every
/// elementwise operation an Eigen expression over `values()`.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMajorMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_size(shape_))) {}

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ConfigError("tensor shape " + shape_str(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
    }
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(std::size_t i) const { return shape_.at(i); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector& values() { return data_; }
  const Vector& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // NCHW element access.
  Scalar& at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  MatrixMap as_matrix(Index rows, Index cols, Index offset = 0) {
    return MatrixMap(data_.data() + offset, rows, cols);
  }
  ConstMatrixMap as_matrix(Index rows, Index cols, Index offset = 0) const {
    return ConstMatrixMap(data_.data() + offset, rows, cols);
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Vector data_;
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

template <typename S>
void require_finite(const Tensor<S>& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite values");
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "max_abs_diff");
  if (a.size() == 0) return S(0);
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

}  // namespace rosfl
