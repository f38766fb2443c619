#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>

#include "rosfl/param_set.hpp"

namespace rosfl {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-4;
  double weight_decay = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// SGD or Adam with L2 weight decay folded into the gradient.
///
/// Adam moments are keyed by parameter name, so one optimizer instance
/// follows a model part across rounds while its values are overwritten by
/// broadcast weights.
template <typename S>
class Optimizer {
 public:
  using Vector = typename Tensor<S>::Vector;

  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return steps_; }

  void step(ParamSet<S>& params, const ParamSet<S>& grads) {
    require_same_layout(params, grads, "optimizer step");
    ++steps_;
    const S lr = static_cast<S>(cfg_.lr);
    const S wd = static_cast<S>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& theta = params[i].value.values();
      const auto& g = grads[i].value.values();
      if (cfg_.kind == OptimizerKind::Sgd) {
        if (wd == S(0)) {
          theta -= lr * g;
        } else {
          theta -= lr * (g + wd * theta);
        }
        continue;
      }
      auto [it, inserted] = moments_.try_emplace(params[i].name);
      Moments& m = it->second;
      if (inserted) {
        m.first = Vector::Zero(theta.size());
        m.second = Vector::Zero(theta.size());
      } else if (m.first.size() != theta.size()) {
        throw ConfigError("optimizer: moment shape mismatch for " + params[i].name);
      }
      const Vector eff = wd == S(0) ? Vector(g) : Vector(g + wd * theta);
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      m.first = b1 * m.first + (S(1) - b1) * eff;
      m.second = b2 * m.second + (S(1) - b2) * eff.cwiseAbs2();
      const S c1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(steps_)));
      const S c2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(steps_)));
      const auto m_hat = (m.first / c1).array();
      const auto v_hat = (m.second / c2).array();
      theta.array() -= lr * m_hat / (v_hat.sqrt() + static_cast<S>(cfg_.eps));
    }
  }

 private:
  struct Moments {
    Vector first, second;
  };

  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

// Functional form: returns the updated copy.
template <typename S>
ParamSet<S> optimizer_step(Optimizer<S>& opt, ParamSet<S> params, const ParamSet<S>& grads) {
  opt.step(params, grads);
  return params;
}

}  // namespace rosfl
