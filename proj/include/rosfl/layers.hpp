#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "rosfl/param_set.hpp"
#include "rosfl/rng.hpp"
#include "rosfl/tensor.hpp"

namespace rosfl {

enum class LayerKind { Conv3x3, Conv1x1, Relu, MaxPool2x2, Upsample2x, Concat, Softmax };

namespace detail {

inline void require_rank4(const Shape& s, const char* layer) {
  if (s.size() != 4) throw ConfigError(std::string(layer) + ": expected NCHW input, got " + shape_str(s));
}

[[noreturn]] inline void backward_before_forward(const std::string& layer) {
  throw ProtocolError(layer + ": backward called without a matching forward");
}

}  // namespace detail

/// Stride-1 convolution with zero "same" padding. K is 3 or 1.
///
/// Each sample is lowered to a (in*K*K, H*W) column matrix so that the
/// forward pass is one GEMM and the backward pass two.
template <typename S, int K>
class ConvSame {
  static_assert(K == 1 || K == 3, "only 1x1 and 3x3 kernels are supported");

 public:
  using RowMajorMatrix = typename Tensor<S>::RowMajorMatrix;

  ConvSame() = default;
  ConvSame(std::string name, Index in_channels, Index out_channels)
      : name_(std::move(name)),
        in_(in_channels),
        out_(out_channels),
        weight_({out_channels, in_channels, K, K}),
        bias_({out_channels}),
        grad_weight_({out_channels, in_channels, K, K}),
        grad_bias_({out_channels}) {
    if (in_channels <= 0 || out_channels <= 0) throw ConfigError(name_ + ": channel counts must be positive");
  }

  static constexpr LayerKind kind = K == 3 ? LayerKind::Conv3x3 : LayerKind::Conv1x1;

  const std::string& name() const { return name_; }
  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }
  Index fan_in() const { return in_ * K * K; }

  // Uniform in +-sqrt(1/fan_in), zero bias, from a stream keyed by layer name.
  void init(std::uint64_t seed) {
    RngStream rng(seed, Purpose::Init, {fnv1a(name_)});
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in()));
    for (Index i = 0; i < weight_.size(); ++i) weight_[i] = static_cast<S>(rng.uniform(-bound, bound));
    bias_.values().setZero();
  }

  Tensor<S> forward(const Tensor<S>& x) {
    detail::require_rank4(x.shape(), name_.c_str());
    if (x.dim(1) != in_) {
      throw ConfigError(name_ + ": expected " + std::to_string(in_) + " input channels, got " +
                        shape_str(x.shape()));
    }
    const Index n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
    Tensor<S> y({n, out_, h, w});
    const auto wmat = weight_.as_matrix(out_, in_ * K * K);
    RowMajorMatrix cols;
    for (Index b = 0; b < n; ++b) {
      auto yb = y.as_matrix(out_, hw, b * out_ * hw);
      if constexpr (K == 1) {
        yb.noalias() = wmat * x.as_matrix(in_, hw, b * in_ * hw);
      } else {
        im2col(x, b, cols);
        yb.noalias() = wmat * cols;
      }
      yb.colwise() += bias_.values();
    }
    require_finite(y, name_.c_str());
    cache_ = x;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!cache_) detail::backward_before_forward(name_);
    const Tensor<S> x = std::move(*cache_);
    cache_.reset();
    const Index n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
    if (grad_out.shape() != Shape{n, out_, h, w}) {
      throw ConfigError(name_ + ": upstream gradient shape " + shape_str(grad_out.shape()));
    }
    Tensor<S> grad_in(x.shape());
    auto gw = grad_weight_.as_matrix(out_, in_ * K * K);
    gw.setZero();
    grad_bias_.values().setZero();
    const auto wmat = weight_.as_matrix(out_, in_ * K * K);
    RowMajorMatrix cols, dcols;
    for (Index b = 0; b < n; ++b) {
      const auto gb = grad_out.as_matrix(out_, hw, b * out_ * hw);
      grad_bias_.values() += gb.rowwise().sum();
      if constexpr (K == 1) {
        gw.noalias() += gb * x.as_matrix(in_, hw, b * in_ * hw).transpose();
        grad_in.as_matrix(in_, hw, b * in_ * hw).noalias() = wmat.transpose() * gb;
      } else {
        im2col(x, b, cols);
        gw.noalias() += gb * cols.transpose();
        dcols.noalias() = wmat.transpose() * gb;
        col2im(dcols, b, grad_in);
      }
    }
    return grad_in;
  }

  template <typename F>
  void for_each_param(F&& f) {
    f(name_ + ".weight", weight_, grad_weight_);
    f(name_ + ".bias", bias_, grad_bias_);
  }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }
  const Tensor<S>& grad_weight() const { return grad_weight_; }
  const Tensor<S>& grad_bias() const { return grad_bias_; }

 private:
  // Row (ci*9 + ky*3 + kx), column (y*W + x) holds input(ci, y+ky-1, x+kx-1).
  static void im2col(const Tensor<S>& x, Index b, RowMajorMatrix& cols) {
    const Index c = x.dim(1), h = x.dim(2), w = x.dim(3);
    cols.setZero(c * 9, h * w);
    for (Index ci = 0; ci < c; ++ci) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx) {
          S* row = cols.data() + (ci * 9 + ky * 3 + kx) * h * w;
          for (Index yy = 0; yy < h; ++yy) {
            const Index sy = yy + ky - 1;
            if (sy < 0 || sy >= h) continue;
            const S* src = x.data() + ((b * c + ci) * h + sy) * w;
            for (Index xx = 0; xx < w; ++xx) {
              const Index sx = xx + kx - 1;
              if (sx >= 0 && sx < w) row[yy * w + xx] = src[sx];
            }
          }
        }
      }
    }
  }

  static void col2im(const RowMajorMatrix& cols, Index b, Tensor<S>& grad) {
    const Index c = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
    for (Index ci = 0; ci < c; ++ci) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx) {
          const S* row = cols.data() + (ci * 9 + ky * 3 + kx) * h * w;
          for (Index yy = 0; yy < h; ++yy) {
            const Index sy = yy + ky - 1;
            if (sy < 0 || sy >= h) continue;
            S* dst = grad.data() + ((b * c + ci) * h + sy) * w;
            for (Index xx = 0; xx < w; ++xx) {
              const Index sx = xx + kx - 1;
              if (sx >= 0 && sx < w) dst[sx] += row[yy * w + xx];
            }
          }
        }
      }
    }
  }

  std::string name_;
  Index in_ = 0, out_ = 0;
  Tensor<S> weight_, bias_, grad_weight_, grad_bias_;
  std::optional<Tensor<S>> cache_;
};

template <typename S>
using Conv3x3 = ConvSame<S, 3>;
template <typename S>
using Conv1x1 = ConvSame<S, 1>;

template <typename S>
class Relu {
 public:
  static constexpr LayerKind kind = LayerKind::Relu;

  Relu() = default;
  explicit Relu(std::string name) : name_(std::move(name)) {}
  const std::string& name() const { return name_; }

  Tensor<S> forward(const Tensor<S>& x) {
    Tensor<S> y(x.shape(), x.values().cwiseMax(S(0)));
    require_finite(y, "relu");
    cache_ = x;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!cache_) detail::backward_before_forward(name_);
    require_same_shape(grad_out, *cache_, "relu backward");
    Tensor<S> g(grad_out.shape(),
                (cache_->values().array() > S(0)).select(grad_out.values().array(), S(0)).matrix());
    cache_.reset();
    return g;
  }

  template <typename F>
  void for_each_param(F&&) {}

 private:
  std::string name_ = "relu";
  std::optional<Tensor<S>> cache_;
};

// Non-overlapping 2x2 max pooling; ties resolve to the first element in
// row-major order.
template <typename S>
class MaxPool2x2 {
 public:
  static constexpr LayerKind kind = LayerKind::MaxPool2x2;

  MaxPool2x2() = default;
  explicit MaxPool2x2(std::string name) : name_(std::move(name)) {}
  const std::string& name() const { return name_; }

  Tensor<S> forward(const Tensor<S>& x) {
    detail::require_rank4(x.shape(), "maxpool2x2");
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ConfigError("maxpool2x2: odd spatial size " + shape_str(x.shape()));
    Tensor<S> y({n, c, h / 2, w / 2});
    std::vector<Index> argmax(static_cast<std::size_t>(y.size()));
    Index o = 0;
    for (Index p = 0; p < n * c; ++p) {
      const Index base = p * h * w;
      for (Index yy = 0; yy < h / 2; ++yy) {
        for (Index xx = 0; xx < w / 2; ++xx, ++o) {
          Index best = base + 2 * yy * w + 2 * xx;
          for (Index dy = 0; dy < 2; ++dy) {
            for (Index dx = 0; dx < 2; ++dx) {
              const Index i = base + (2 * yy + dy) * w + 2 * xx + dx;
              if (x[i] > x[best]) best = i;
            }
          }
          y[o] = x[best];
          argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
    require_finite(y, "maxpool2x2");
    cache_ = Cache{x.shape(), std::move(argmax)};
    return y;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!cache_) detail::backward_before_forward(name_);
    if (grad_out.size() != static_cast<Index>(cache_->argmax.size())) {
      throw ConfigError("maxpool2x2 backward: upstream gradient shape " + shape_str(grad_out.shape()));
    }
    Tensor<S> g(cache_->input_shape);
    for (Index o = 0; o < grad_out.size(); ++o) g[cache_->argmax[static_cast<std::size_t>(o)]] += grad_out[o];
    cache_.reset();
    return g;
  }

  template <typename F>
  void for_each_param(F&&) {}

 private:
  struct Cache {
    Shape input_shape;
    std::vector<Index> argmax;
  };
  std::string name_ = "maxpool2x2";
  std::optional<Cache> cache_;
};

template <typename S>
class Upsample2x {
 public:
  static constexpr LayerKind kind = LayerKind::Upsample2x;

  Upsample2x() = default;
  explicit Upsample2x(std::string name) : name_(std::move(name)) {}
  const std::string& name() const { return name_; }

  Tensor<S> forward(const Tensor<S>& x) {
    detail::require_rank4(x.shape(), "upsample2x");
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> y({n, c, 2 * h, 2 * w});
    for (Index p = 0; p < n * c; ++p) {
      for (Index yy = 0; yy < 2 * h; ++yy) {
        for (Index xx = 0; xx < 2 * w; ++xx) {
          y[(p * 2 * h + yy) * 2 * w + xx] = x[(p * h + yy / 2) * w + xx / 2];
        }
      }
    }
    input_shape_ = x.shape();
    return y;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!input_shape_) detail::backward_before_forward(name_);
    const Shape s = std::move(*input_shape_);
    input_shape_.reset();
    const Index h = s[2], w = s[3];
    if (grad_out.shape() != Shape{s[0], s[1], 2 * h, 2 * w}) {
      throw ConfigError("upsample2x backward: upstream gradient shape " + shape_str(grad_out.shape()));
    }
    Tensor<S> g(s);
    for (Index p = 0; p < s[0] * s[1]; ++p) {
      for (Index yy = 0; yy < 2 * h; ++yy) {
        for (Index xx = 0; xx < 2 * w; ++xx) {
          g[(p * h + yy / 2) * w + xx / 2] += grad_out[(p * 2 * h + yy) * 2 * w + xx];
        }
      }
    }
    return g;
  }

  template <typename F>
  void for_each_param(F&&) {}

 private:
  std::string name_ = "upsample2x";
  std::optional<Shape> input_shape_;
};

/// Channel concatenation [first; second]. Binary, so it sits outside the
/// unary `Layer` variant.
template <typename S>
class ConcatChannels {
 public:
  static constexpr LayerKind kind = LayerKind::Concat;

  ConcatChannels() = default;
  explicit ConcatChannels(std::string name) : name_(std::move(name)) {}
  const std::string& name() const { return name_; }

  Tensor<S> forward(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_rank4(a.shape(), "concat");
    detail::require_rank4(b.shape(), "concat");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
      throw ConfigError("concat: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const Index n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor<S> y({n, ca + cb, a.dim(2), a.dim(3)});
    for (Index i = 0; i < n; ++i) {
      y.values().segment(i * (ca + cb) * hw, ca * hw) = a.values().segment(i * ca * hw, ca * hw);
      y.values().segment((i * (ca + cb) + ca) * hw, cb * hw) = b.values().segment(i * cb * hw, cb * hw);
    }
    split_ = std::pair{a.shape(), b.shape()};
    return y;
  }

  std::pair<Tensor<S>, Tensor<S>> backward(const Tensor<S>& grad_out) {
    if (!split_) detail::backward_before_forward(name_);
    const auto [sa, sb] = std::move(*split_);
    split_.reset();
    const Index n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    if (grad_out.size() != n * (ca + cb) * hw) {
      throw ConfigError("concat backward: upstream gradient shape " + shape_str(grad_out.shape()));
    }
    Tensor<S> ga(sa), gb(sb);
    for (Index i = 0; i < n; ++i) {
      ga.values().segment(i * ca * hw, ca * hw) = grad_out.values().segment(i * (ca + cb) * hw, ca * hw);
      gb.values().segment(i * cb * hw, cb * hw) = grad_out.values().segment((i * (ca + cb) + ca) * hw, cb * hw);
    }
    return {std::move(ga), std::move(gb)};
  }

 private:
  std::string name_ = "concat";
  std::optional<std::pair<Shape, Shape>> split_;
};

// Softmax over the channel axis at every pixel.
template <typename S>
class ChannelSoftmax {
 public:
  static constexpr LayerKind kind = LayerKind::Softmax;

  ChannelSoftmax() = default;
  explicit ChannelSoftmax(std::string name) : name_(std::move(name)) {}
  const std::string& name() const { return name_; }

  Tensor<S> forward(const Tensor<S>& x) {
    detail::require_rank4(x.shape(), "softmax");
    const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<S> y(x.shape());
    for (Index b = 0; b < n; ++b) {
      const auto in = x.as_matrix(c, hw, b * c * hw);
      auto out = y.as_matrix(c, hw, b * c * hw);
      const auto shifted = (in.rowwise() - in.colwise().maxCoeff()).array().exp().matrix().eval();
      out = shifted.array().rowwise() / shifted.colwise().sum().array();
    }
    require_finite(y, "softmax");
    cache_ = y;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (!cache_) detail::backward_before_forward(name_);
    const Tensor<S> p = std::move(*cache_);
    cache_.reset();
    require_same_shape(grad_out, p, "softmax backward");
    const Index n = p.dim(0), c = p.dim(1), hw = p.dim(2) * p.dim(3);
    Tensor<S> g(p.shape());
    for (Index b = 0; b < n; ++b) {
      const auto pb = p.as_matrix(c, hw, b * c * hw);
      const auto gb = grad_out.as_matrix(c, hw, b * c * hw);
      const auto dot = pb.cwiseProduct(gb).colwise().sum().eval();
      g.as_matrix(c, hw, b * c * hw) = pb.cwiseProduct(gb.rowwise() - dot);
    }
    return g;
  }

  template <typename F>
  void for_each_param(F&&) {}

 private:
  std::string name_ = "softmax";
  std::optional<Tensor<S>> cache_;
};

/// Any unary layer, for code that treats layers generically (gradient
/// checks, layer stacks).
template <typename S>
using Layer = std::variant<Conv3x3<S>, Conv1x1<S>, Relu<S>, MaxPool2x2<S>, Upsample2x<S>, ChannelSoftmax<S>>;

template <typename S>
Tensor<S> forward(Layer<S>& layer, const Tensor<S>& x) {
  return std::visit([&](auto& l) { return l.forward(x); }, layer);
}

template <typename S>
struct LayerGrads {
  Tensor<S> input_grad;
  ParamSet<S> param_grads;
};

template <typename S>
LayerGrads<S> backward(Layer<S>& layer, const Tensor<S>& grad_out) {
  return std::visit(
      [&](auto& l) {
        LayerGrads<S> out{l.backward(grad_out), ParamSet<S>()};
        l.for_each_param([&](const std::string& name, Tensor<S>&, Tensor<S>& g) { out.param_grads.add(name, g); });
        return out;
      },
      layer);
}

template <typename S>
LayerKind kind_of(const Layer<S>& layer) {
  return std::visit([](const auto& l) { return std::decay_t<decltype(l)>::kind; }, layer);
}

}  // namespace rosfl
