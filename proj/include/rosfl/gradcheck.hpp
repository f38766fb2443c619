#pragma once

#include <algorithm>
#include <functional>

#include "rosfl/param_set.hpp"

namespace rosfl {

/// Central-difference gradient of `loss` at `params`, one scalar at a time.
///
/// `loss` must be deterministic: it is evaluated twice per scalar and any
/// run-to-run variation shows up directly as gradient error.
template <typename S>
ParamSet<S> finite_diff_grad(const std::function<S(const ParamSet<S>&)>& loss, ParamSet<S> params, S eps) {
  if (!(eps >= S(1e-7) && eps <= S(1e-3))) throw ConfigError("finite_diff_grad: eps outside [1e-7, 1e-3]");
  ParamSet<S> grads = params.zeros_like();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].value;
    for (Index j = 0; j < theta.size(); ++j) {
      const S saved = theta[j];
      theta[j] = saved + eps;
      const S plus = loss(params);
      theta[j] = saved - eps;
      const S minus = loss(params);
      theta[j] = saved;
      grads[i].value[j] = (plus - minus) / (S(2) * eps);
    }
  }
  return grads;
}

// max|a - b| / max(max|a|, max|b|); zero when both are zero.
template <typename S>
S relative_error(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "relative_error");
  if (a.size() == 0) return S(0);
  const S scale = std::max(a.values().cwiseAbs().maxCoeff(), b.values().cwiseAbs().maxCoeff());
  if (scale == S(0)) return S(0);
  return (a.values() - b.values()).cwiseAbs().maxCoeff() / scale;
}

template <typename S>
S relative_error(const ParamSet<S>& a, const ParamSet<S>& b) {
  require_same_layout(a, b, "relative_error");
  S worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i].value, b[i].value));
  return worst;
}

}  // namespace rosfl
