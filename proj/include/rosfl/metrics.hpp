#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "rosfl/tensor.hpp"

namespace rosfl {

// Value written to CSV/JSON when PSNR is infinite (identical images).
inline constexpr double kPsnrCap = 99.0;

template <typename S>
struct LossResult {
  S value;
  Tensor<S> grad;  // d(value)/d(prediction)
};

template <typename S>
S mse(const Tensor<S>& pred, const Tensor<S>& target) {
  require_same_shape(pred, target, "mse");
  if (pred.size() == 0) throw ConfigError("mse: empty tensors");
  return (pred.values() - target.values()).squaredNorm() / static_cast<S>(pred.size());
}

// +inf when the images are identical.
template <typename S>
double psnr(const Tensor<S>& pred, const Tensor<S>& target, double data_range = 1.0) {
  if (!(data_range > 0)) throw ConfigError("psnr: data_range must be positive");
  const double m = static_cast<double>(mse(pred, target));
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / m);
}

inline double cap_psnr(double v) { return std::isfinite(v) ? v : kPsnrCap; }

template <typename S>
LossResult<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  require_same_shape(pred, target, "mse_loss");
  const S n = static_cast<S>(pred.size());
  Tensor<S> grad(pred.shape(), (S(2) / n) * (pred.values() - target.values()));
  return {(pred.values() - target.values()).squaredNorm() / n, std::move(grad)};
}

namespace detail {

// Labels stored as (N,1,H,W) class indices.
template <typename S>
int label_at(const Tensor<S>& mask, Index i, int classes) {
  const S v = mask[i];
  const int c = static_cast<int>(v);
  if (static_cast<S>(c) != v || c < 0 || c >= classes) {
    throw ConfigError("mask value " + std::to_string(static_cast<double>(v)) + " is not a class in [0, " +
                      std::to_string(classes - 1) + "]");
  }
  return c;
}

template <typename S>
void require_probs_and_mask(const Tensor<S>& probs, const Tensor<S>& mask) {
  if (probs.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || probs.dim(0) != mask.dim(0) ||
      probs.dim(2) != mask.dim(2) || probs.dim(3) != mask.dim(3)) {
    throw ConfigError("probabilities " + shape_str(probs.shape()) + " do not match mask " + shape_str(mask.shape()));
  }
}

}  // namespace detail

// Mean over pixels of -log p[true class]. Probabilities are floored at 1e-12.
template <typename S>
LossResult<S> cross_entropy(const Tensor<S>& probs, const Tensor<S>& mask) {
  detail::require_probs_and_mask(probs, mask);
  const Index n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const S pixels = static_cast<S>(n * hw);
  const S floor = S(1e-12);
  Tensor<S> grad(probs.shape());
  S total = 0;
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < hw; ++i) {
      const int k = detail::label_at(mask, b * hw + i, static_cast<int>(c));
      const Index at = (b * c + k) * hw + i;
      const S p = std::max(probs[at], floor);
      total -= std::log(p);
      if (probs[at] > floor) grad[at] = -S(1) / (pixels * p);
    }
  }
  return {total / pixels, std::move(grad)};
}

// 1 - mean over classes of (2 sum(p*g) + s) / (sum(p) + sum(g) + s), with
// the sums taken over the whole batch.
template <typename S>
LossResult<S> soft_dice_loss(const Tensor<S>& probs, const Tensor<S>& mask, S smooth = S(1e-6)) {
  detail::require_probs_and_mask(probs, mask);
  const Index n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  std::vector<S> inter(static_cast<std::size_t>(c), 0), psum(static_cast<std::size_t>(c), 0),
      gsum(static_cast<std::size_t>(c), 0);
  std::vector<int> labels(static_cast<std::size_t>(n * hw));
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < hw; ++i) {
      const int k = detail::label_at(mask, b * hw + i, static_cast<int>(c));
      labels[static_cast<std::size_t>(b * hw + i)] = k;
      gsum[static_cast<std::size_t>(k)] += 1;
      for (Index ch = 0; ch < c; ++ch) {
        const S p = probs[(b * c + ch) * hw + i];
        psum[static_cast<std::size_t>(ch)] += p;
        if (ch == k) inter[static_cast<std::size_t>(ch)] += p;
      }
    }
  }
  S score = 0;
  std::vector<S> num(static_cast<std::size_t>(c)), den(static_cast<std::size_t>(c));
  for (std::size_t ch = 0; ch < static_cast<std::size_t>(c); ++ch) {
    num[ch] = S(2) * inter[ch] + smooth;
    den[ch] = psum[ch] + gsum[ch] + smooth;
    score += num[ch] / den[ch];
  }
  const S inv_c = S(1) / static_cast<S>(c);
  Tensor<S> grad(probs.shape());
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < hw; ++i) {
      const int k = labels[static_cast<std::size_t>(b * hw + i)];
      for (Index ch = 0; ch < c; ++ch) {
        const auto u = static_cast<std::size_t>(ch);
        const S g = ch == k ? S(1) : S(0);
        grad[(b * c + ch) * hw + i] = -inv_c * (S(2) * g * den[u] - num[u]) / (den[u] * den[u]);
      }
    }
  }
  return {S(1) - inv_c * score, std::move(grad)};
}

// Cross-entropy plus soft Dice, equal weights.
template <typename S>
LossResult<S> segmentation_loss(const Tensor<S>& probs, const Tensor<S>& mask) {
  auto ce = cross_entropy(probs, mask);
  auto dl = soft_dice_loss(probs, mask);
  ce.grad.values() += dl.grad.values();
  return {ce.value + dl.value, std::move(ce.grad)};
}

// (N,C,H,W) probabilities -> (N,1,H,W) class indices; ties pick the lowest class.
template <typename S>
Tensor<S> argmax_mask(const Tensor<S>& probs) {
  const Index n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  Tensor<S> out({n, 1, probs.dim(2), probs.dim(3)});
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < hw; ++i) {
      Index best = 0;
      for (Index ch = 1; ch < c; ++ch) {
        if (probs[(b * c + ch) * hw + i] > probs[(b * c + best) * hw + i]) best = ch;
      }
      out[b * hw + i] = static_cast<S>(best);
    }
  }
  return out;
}

struct Overlap {
  double intersection = 0, pred_area = 0, true_area = 0;
};

template <typename S>
Overlap overlap(const Tensor<S>& pred_mask, const Tensor<S>& true_mask, int cls, int classes) {
  require_same_shape(pred_mask, true_mask, "mask overlap");
  if (cls < 0 || cls >= classes) throw ConfigError("class " + std::to_string(cls) + " out of range");
  Overlap o;
  for (Index i = 0; i < pred_mask.size(); ++i) {
    const bool a = detail::label_at(pred_mask, i, classes) == cls;
    const bool b = detail::label_at(true_mask, i, classes) == cls;
    o.intersection += (a && b) ? 1 : 0;
    o.pred_area += a ? 1 : 0;
    o.true_area += b ? 1 : 0;
  }
  return o;
}

// 2|A n B| / (|A| + |B|); 1.0 when both are empty.
template <typename S>
double dice(const Tensor<S>& pred_mask, const Tensor<S>& true_mask, int cls, int classes) {
  const Overlap o = overlap(pred_mask, true_mask, cls, classes);
  if (o.pred_area + o.true_area == 0) return 1.0;
  return 2.0 * o.intersection / (o.pred_area + o.true_area);
}

// |A n B| / |A u B|; 1.0 when both are empty.
template <typename S>
double jaccard(const Tensor<S>& pred_mask, const Tensor<S>& true_mask, int cls, int classes) {
  const Overlap o = overlap(pred_mask, true_mask, cls, classes);
  const double uni = o.pred_area + o.true_area - o.intersection;
  if (uni == 0) return 1.0;
  return o.intersection / uni;
}

// Macro averages over the foreground classes 1..C-1.
template <typename S>
double mean_foreground_dice(const Tensor<S>& pred_mask, const Tensor<S>& true_mask, int classes) {
  double sum = 0;
  for (int c = 1; c < classes; ++c) sum += dice(pred_mask, true_mask, c, classes);
  return sum / (classes - 1);
}

template <typename S>
double mean_foreground_jaccard(const Tensor<S>& pred_mask, const Tensor<S>& true_mask, int classes) {
  double sum = 0;
  for (int c = 1; c < classes; ++c) sum += jaccard(pred_mask, true_mask, c, classes);
  return sum / (classes - 1);
}

/// One row of metrics.csv. client == -1 is the global (client-averaged) row.
struct MetricRecord {
  std::uint32_t round = 0;
  int client = -1;
  std::string name;
  double value = 0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

}  // namespace rosfl
