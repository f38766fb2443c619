#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rosfl/param_set.hpp"

namespace rosfl {

/// Per-client weights |D_i| / |D|.
class AggregationWeights {
 public:
  static AggregationWeights from_sizes(std::span<const std::size_t> sizes) {
    if (sizes.empty()) throw ConfigError("aggregation weights: no clients");
    double total = 0;
    for (auto s : sizes) total += static_cast<double>(s);
    if (total <= 0) throw ConfigError("aggregation weights: total dataset size is zero");
    std::vector<double> w;
    for (auto s : sizes) w.push_back(static_cast<double>(s) / total);
    return AggregationWeights(std::move(w));
  }

  explicit AggregationWeights(std::vector<double> weights) : w_(std::move(weights)) {
    if (w_.empty()) throw ConfigError("aggregation weights: no clients");
    double sum = 0;
    for (double v : w_) {
      if (!(v >= 0)) throw ConfigError("aggregation weights must be non-negative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("aggregation weights sum to " + std::to_string(sum) + ", not 1");
  }

  std::size_t size() const { return w_.size(); }
  double operator[](std::size_t i) const { return w_[i]; }
  const std::vector<double>& values() const { return w_; }

 private:
  std::vector<double> w_;
};

/// Weighted elementwise average, accumulated in ascending client order.
template <typename S>
ParamSet<S> aggregate(std::span<const ParamSet<S>> params, const AggregationWeights& weights) {
  if (params.size() != weights.size()) {
    throw ConfigError("aggregate: " + std::to_string(params.size()) + " parameter sets but " +
                      std::to_string(weights.size()) + " weights");
  }
  for (const auto& p : params) require_same_layout(params[0], p, "aggregate");
  ParamSet<S> out = params[0].zeros_like();
  for (std::size_t n = 0; n < params.size(); ++n) {
    const S w = static_cast<S>(weights[n]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].value.values() += w * params[n][i].value.values();
  }
  return out;
}

template <typename S>
ParamSet<S> aggregate(const std::vector<ParamSet<S>>& params, const AggregationWeights& weights) {
  return aggregate(std::span<const ParamSet<S>>(params), weights);
}

enum class CorrectionDirection {
  Extrapolate,  // theta_c = theta_k + eta * grad L_con
  Stabilize,    // theta_c = theta_k - eta * grad L_con
};

struct DwcsConfig {
  bool enabled = true;
  double mu = 1e-4;
  std::optional<double> eta;  // defaults to the training learning rate
  double beta = 0.99;
  CorrectionDirection direction = CorrectionDirection::Extrapolate;

  void validate() const {
    if (!(mu >= 0)) throw ConfigError("dwcs.mu must be >= 0");
    if (!(beta >= 0 && beta < 1)) throw ConfigError("dwcs.beta must be in [0, 1)");
    if (eta && !(*eta > 0)) throw ConfigError("dwcs.eta must be > 0");
  }

  double step(double training_lr) const { return eta.value_or(training_lr); }

  friend bool operator==(const DwcsConfig&, const DwcsConfig&) = default;
};

// Balancing factor min(1 - 1/(k+1), beta) for round k >= 1.
inline double alpha(std::uint32_t k, double beta) {
  if (k < 1) throw ConfigError("alpha: round index must be >= 1");
  return std::min(1.0 - 1.0 / (static_cast<double>(k) + 1.0), beta);
}

/// Drift-corrected model for round k.
///
/// With L_con = mu/2 ||theta_k - theta_prev||^2 the correction model is
/// theta_c = theta_k +- eta * mu * (theta_k - theta_prev) and the result is
/// (1 - alpha) theta_k + alpha theta_c, evaluated as
/// theta_k + alpha (theta_c - theta_k) so that zero drift returns theta_k
/// bit-for-bit.
template <typename S>
ParamSet<S> correct(const ParamSet<S>& theta_k, const ParamSet<S>& theta_prev, double mu, double eta, double beta,
                    CorrectionDirection direction, std::uint32_t k) {
  require_same_layout(theta_k, theta_prev, "correct");
  const S a = static_cast<S>(alpha(k, beta));
  const S step = static_cast<S>(direction == CorrectionDirection::Extrapolate ? eta * mu : -eta * mu);
  ParamSet<S> out(theta_k.part(), theta_k.round());
  for (std::size_t i = 0; i < theta_k.size(); ++i) {
    const auto& cur = theta_k[i].value.values();
    const auto& prev = theta_prev[i].value.values();
    const typename Tensor<S>::Vector corrected = cur + step * (cur - prev);
    out.add(theta_k[i].name, Tensor<S>(theta_k[i].value.shape(), cur + a * (corrected - cur)));
  }
  return out;
}

template <typename S>
ParamSet<S> correct(const ParamSet<S>& theta_k, const ParamSet<S>& theta_prev, const DwcsConfig& cfg,
                    double training_lr, std::uint32_t k) {
  return correct(theta_k, theta_prev, cfg.mu, cfg.step(training_lr), cfg.beta, cfg.direction, k);
}

/// Previous round's post-correction model of one part.
template <typename S>
class AnchorStore {
 public:
  AnchorStore() = default;
  explicit AnchorStore(ParamSet<S> initial) : anchor_(std::move(initial)) {}

  bool has_anchor() const { return anchor_.has_value(); }
  const ParamSet<S>& anchor() const {
    if (!anchor_) throw ProtocolError("anchor store is empty");
    return *anchor_;
  }
  std::uint32_t round() const { return anchor_ ? anchor_->round() : 0; }

  void update(ParamSet<S> params, std::uint32_t round) {
    if (anchor_ && round <= anchor_->round()) {
      throw ProtocolError("anchor round must increase: " + std::to_string(round) + " after " +
                          std::to_string(anchor_->round()));
    }
    params.set_round(round);
    anchor_ = std::move(params);
  }

 private:
  std::optional<ParamSet<S>> anchor_;
};

/// Round-end step shared by both servers: aggregate the client copies of a
/// part, correct against the anchor when enabled, and advance the anchor.
template <typename S>
ParamSet<S> aggregate_and_correct(const std::vector<ParamSet<S>>& locals, const AggregationWeights& weights,
                                  AnchorStore<S>& anchor, const DwcsConfig& dwcs, double training_lr,
                                  std::uint32_t k) {
  ParamSet<S> merged = aggregate(locals, weights);
  merged.set_round(k);
  if (dwcs.enabled) merged = correct(merged, anchor.anchor(), dwcs, training_lr, k);
  merged.set_round(k);
  anchor.update(merged, k);
  return merged;
}

}  // namespace rosfl
