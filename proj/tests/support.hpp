#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rosfl/gradcheck.hpp"
#include "rosfl/layers.hpp"
#include "rosfl/rng.hpp"
#include "rosfl/wire.hpp"

namespace rosfl::testing {

inline Tensord random_tensor(RngStream& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensord t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so ReLU never sits on its kink under +-eps.
inline Tensord random_nonzero(RngStream& rng, Shape shape) {
  Tensord t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) {
    const double m = rng.uniform(0.05, 1.0);
    t[i] = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

// Distinct values with gaps of 0.01 so max-pool winners are stable under +-eps.
inline Tensord random_distinct(RngStream& rng, Shape shape) {
  Tensord t(std::move(shape));
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng.engine());
  for (Index i = 0; i < t.size(); ++i) t[i] = v[static_cast<std::size_t>(i)];
  return t;
}

struct GradCheck {
  double input_rel_error = 0;
  double param_rel_error = 0;
};

/// Compares a unary layer's analytic backward against central differences
/// of L = sum(weights * layer(x)).
template <typename L>
GradCheck check_layer(L& layer, const Tensord& x, RngStream& rng, double eps = 1e-5) {
  const Tensord y0 = layer.forward(x);
  const Tensord weights = random_tensor(rng, y0.shape());
  const Tensord analytic_input = layer.backward(weights);
  ParamSet<double> analytic_params, params;
  layer.for_each_param([&](const std::string& n, Tensord& v, Tensord& g) {
    params.add(n, v);
    analytic_params.add(n, g);
  });

  auto load = [&](const ParamSet<double>& p) {
    std::size_t i = 0;
    layer.for_each_param([&](const std::string&, Tensord& v, Tensord&) { v = p[i++].value; });
  };
  std::function<double(const ParamSet<double>&)> loss_params = [&](const ParamSet<double>& p) {
    load(p);
    return layer.forward(x).values().dot(weights.values());
  };
  GradCheck out;
  if (!params.empty()) {
    const auto numeric = finite_diff_grad<double>(loss_params, params, eps);
    load(params);
    out.param_rel_error = relative_error(analytic_params, numeric);
  }
  ParamSet<double> input;
  input.add("input", x);
  std::function<double(const ParamSet<double>&)> loss_input = [&](const ParamSet<double>& p) {
    return layer.forward(p[0].value).values().dot(weights.values());
  };
  const auto numeric_input = finite_diff_grad<double>(loss_input, input, eps);
  out.input_rel_error = relative_error(analytic_input, numeric_input[0].value);
  return out;
}

// Concat is binary: check both input gradients.
inline double check_concat(const Tensord& a, const Tensord& b, RngStream& rng, double eps = 1e-5) {
  ConcatChannels<double> cat;
  const Tensord y = cat.forward(a, b);
  const Tensord weights = random_tensor(rng, y.shape());
  auto [ga, gb] = cat.backward(weights);
  ParamSet<double> inputs;
  inputs.add("a", a);
  inputs.add("b", b);
  std::function<double(const ParamSet<double>&)> loss = [&](const ParamSet<double>& p) {
    ConcatChannels<double> c;
    return c.forward(p[0].value, p[1].value).values().dot(weights.values());
  };
  const auto numeric = finite_diff_grad<double>(loss, inputs, eps);
  return std::max(relative_error(ga, numeric[0].value), relative_error(gb, numeric[1].value));
}

// Finite doubles from random bit patterns, plus signed zeros, infinities and
// subnormals.
inline double random_bits_double(RngStream& rng) {
  switch (rng.uniform_int(0, 9)) {
    case 0: return -0.0;
    case 1: return std::numeric_limits<double>::infinity();
    case 2: return std::numeric_limits<double>::denorm_min() * static_cast<double>(rng.uniform_int(1, 1000));
    default: break;
  }
  for (;;) {
    const auto bits = static_cast<std::uint64_t>(rng.engine()());
    const double v = std::bit_cast<double>(bits);
    if (!std::isnan(v)) return v;
  }
}

inline TensorRecord random_record(RngStream& rng, std::string name) {
  TensorRecord rec;
  rec.name = std::move(name);
  const auto rank = rng.uniform_int(0, 4);
  std::size_t count = 1;
  for (int i = 0; i < rank; ++i) {
    rec.shape.push_back(static_cast<std::uint32_t>(rng.uniform_int(0, 5)));
    count *= rec.shape.back();
  }
  if (rng.uniform() < 0.5) {
    std::vector<double> v(count);
    for (auto& x : v) x = random_bits_double(rng);
    rec.data = std::move(v);
  } else {
    std::vector<float> v(count);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1e6, 1e6));
    rec.data = std::move(v);
  }
  return rec;
}

inline WireMessage random_message(RngStream& rng) {
  WireMessage m;
  m.kind = kAllKinds[rng.uniform_int(0, std::size(kAllKinds) - 1)];
  m.round = static_cast<std::uint32_t>(rng.engine()());
  m.client = static_cast<std::uint16_t>(rng.uniform_int(0, 65535));
  m.epoch = static_cast<std::uint16_t>(rng.uniform_int(0, 65535));
  m.batch = static_cast<std::uint32_t>(rng.engine()());
  const auto schema = payload_schema(m.kind);
  if (schema.exact_name) {
    m.payload.push_back(random_record(rng, *schema.exact_name));
  } else if (schema.max_records > 0) {
    const auto n = rng.uniform_int(0, 6);
    for (int i = 0; i < n; ++i) {
      const auto& prefix = schema.allowed_prefixes[static_cast<std::size_t>(rng.uniform_int(0, 1))];
      m.payload.push_back(random_record(rng, prefix + "layer" + std::to_string(i) + ".weight"));
    }
  }
  return m;
}

}  // namespace rosfl::testing
