#include "doctest.h"

#include <cmath>

#include "rosfl/fedops.hpp"
#include "support.hpp"

using namespace rosfl;
using rosfl::testing::random_tensor;

namespace {

ParamSet<double> filled(double v, Part part = Part::Full) {
  ParamSet<double> p(part, 0);
  p.add("a.weight", Tensord::constant({2, 3}, v));
  p.add("a.bias", Tensord::constant({3}, v));
  return p;
}

ParamSet<double> random_params(RngStream& rng, const std::string& prefix = "", Part part = Part::Full) {
  ParamSet<double> p(part, 0);
  p.add(prefix + "x.weight", random_tensor(rng, {3, 2, 3, 3}));
  p.add(prefix + "x.bias", random_tensor(rng, {3}));
  p.add(prefix + "y.weight", random_tensor(rng, {1, 3, 1, 1}));
  return p;
}

bool all_equal(const ParamSet<double>& p, double v) {
  for (const auto& e : p) {
    if (!(e.value.values().array() == v).all()) return false;
  }
  return true;
}

ParamSet<double> scaled(const ParamSet<double>& p, double c) {
  ParamSet<double> out(p.part(), p.round());
  for (const auto& e : p) out.add(e.name, Tensord(e.value.shape(), c * e.value.values()));
  return out;
}

// Plain loops over flattened values, written without Eigen expressions.
std::vector<double> naive_aggregate(const std::vector<ParamSet<double>>& ps, const std::vector<double>& w) {
  std::vector<double> out;
  for (std::size_t t = 0; t < ps[0].size(); ++t) {
    for (Index i = 0; i < ps[0][t].value.size(); ++i) {
      double acc = 0;
      for (std::size_t n = 0; n < ps.size(); ++n) acc += w[n] * ps[n][t].value[i];
      out.push_back(acc);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("aggregation examples") {
  SUBCASE("equal sizes average") {
    auto w = AggregationWeights::from_sizes(std::vector<std::size_t>{5, 5});
    CHECK(all_equal(aggregate(std::vector{filled(0), filled(2)}, w), 1.0));
  }
  SUBCASE("size-weighted") {
    auto w = AggregationWeights::from_sizes(std::vector<std::size_t>{1, 3});
    CHECK(w[0] == 0.25);
    CHECK(all_equal(aggregate(std::vector{filled(0), filled(4)}, w), 3.0));
  }
  SUBCASE("single client is the identity") {
    RngStream rng(1, Purpose::Test, {10});
    const auto p = random_params(rng);
    CHECK(aggregate(std::vector{p}, AggregationWeights({1.0})) == p);
  }
}

TEST_CASE("aggregation errors") {
  auto w = AggregationWeights::from_sizes(std::vector<std::size_t>{1, 1});
  ParamSet<double> other;
  other.add("a.weight", Tensord({3, 2}));
  other.add("a.bias", Tensord({3}));
  CHECK_THROWS_AS(aggregate(std::vector{filled(0), other}, w), ConfigError);
  CHECK_THROWS_AS(AggregationWeights({0.5, 0.6}), ConfigError);
  CHECK_THROWS_AS(AggregationWeights({1.5, -0.5}), ConfigError);
  CHECK_THROWS_AS(aggregate(std::vector{filled(0)}, w), ConfigError);
}

TEST_CASE("aggregation matches a naive loop and is linear") {
  RngStream rng(2, Purpose::Test, {11});
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    std::vector<std::size_t> sizes;
    std::vector<ParamSet<double>> ps;
    for (std::size_t i = 0; i < n; ++i) {
      sizes.push_back(static_cast<std::size_t>(rng.uniform_int(1, 100)));
      ps.push_back(random_params(rng));
    }
    const auto w = AggregationWeights::from_sizes(sizes);
    const auto merged = aggregate(ps, w);
    const auto naive = naive_aggregate(ps, w.values());
    const auto flat = flatten(merged);
    REQUIRE(static_cast<std::size_t>(flat.size()) == naive.size());
    for (std::size_t i = 0; i < naive.size(); ++i) CHECK(std::abs(flat[static_cast<Index>(i)] - naive[i]) < 1e-12);

    const double c = rng.uniform(-3, 3);
    std::vector<ParamSet<double>> scaled_ps;
    for (const auto& p : ps) scaled_ps.push_back(scaled(p, c));
    CHECK(max_abs_diff(aggregate(scaled_ps, w), scaled(merged, c)) < 1e-12);

    std::vector<ParamSet<double>> same(n, ps[0]);
    CHECK(max_abs_diff(aggregate(same, w), ps[0]) < 1e-15);
  }
}

TEST_CASE("identical inputs with power-of-two weights aggregate exactly") {
  RngStream rng(3, Purpose::Test, {12});
  const auto p = random_params(rng);
  CHECK(aggregate(std::vector{p, p, p, p}, AggregationWeights({0.25, 0.25, 0.25, 0.25})) == p);
}

TEST_CASE("part-wise aggregation equals whole-vector aggregation") {
  RngStream rng(4, Purpose::Test, {13});
  std::vector<ParamSet<double>> heads, bodies, tails, wholes;
  for (int n = 0; n < 3; ++n) {
    heads.push_back(random_params(rng, "head/", Part::Head));
    bodies.push_back(random_params(rng, "body/", Part::Body));
    tails.push_back(random_params(rng, "tail/", Part::Tail));
    ParamSet<double> whole;
    for (const auto* part : {&heads.back(), &bodies.back(), &tails.back()}) {
      for (const auto& e : *part) whole.add(e.name, e.value);
    }
    wholes.push_back(whole);
  }
  const auto w = AggregationWeights::from_sizes(std::vector<std::size_t>{7, 11, 13});
  const auto merged_whole = flatten(aggregate(wholes, w));
  Eigen::VectorXd parts(merged_whole.size());
  parts << flatten(aggregate(heads, w)), flatten(aggregate(bodies, w)), flatten(aggregate(tails, w));
  CHECK((parts.array() == merged_whole.array()).all());
}

TEST_CASE("alpha schedule") {
  CHECK(alpha(1, 0.99) == 0.5);
  CHECK(alpha(9, 0.99) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(alpha(1000000, 0.99) == 0.99);
  CHECK_THROWS_AS(alpha(0, 0.99), ConfigError);
  double prev = 0;
  for (std::uint32_t k = 1; k < 500; ++k) {
    const double a = alpha(k, 0.9);
    CHECK(a >= prev);
    CHECK(a <= 0.9);
    prev = a;
  }
}

TEST_CASE("dwcs config validation") {
  DwcsConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.mu == 1e-4);
  CHECK(cfg.beta == 0.99);
  CHECK(cfg.direction == CorrectionDirection::Extrapolate);
  CHECK(cfg.step(0.01) == 0.01);
  cfg.eta = 0.5;
  CHECK(cfg.step(0.01) == 0.5);
  DwcsConfig bad;
  bad.mu = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.beta = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.eta = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("correction scalar example") {
  ParamSet<double> k, prev;
  k.add("w", Tensord::constant({1}, 2.0));
  prev.add("w", Tensord::constant({1}, 1.0));
  const auto r = correct(k, prev, 0.5, 0.1, 0.99, CorrectionDirection::Extrapolate, 1);
  CHECK(r[0].value[0] == doctest::Approx(2.025).epsilon(1e-14));
  const auto s = correct(k, prev, 0.5, 0.1, 0.99, CorrectionDirection::Stabilize, 1);
  CHECK(s[0].value[0] == doctest::Approx(1.975).epsilon(1e-14));
}

TEST_CASE("correction identities are exact") {
  RngStream rng(5, Purpose::Test, {14});
  for (auto dir : {CorrectionDirection::Extrapolate, CorrectionDirection::Stabilize}) {
    const auto k = random_params(rng);
    const auto prev = random_params(rng);
    CHECK(correct(k, k, 0.3, 0.7, 0.99, dir, 4) == k);
    CHECK(correct(k, prev, 0.0, 0.7, 0.99, dir, 4) == k);
  }
}

TEST_CASE("correction matches the closed form and its norm identity") {
  RngStream rng(6, Purpose::Test, {15});
  for (int trial = 0; trial < 30; ++trial) {
    const auto k = random_params(rng);
    const auto prev = random_params(rng);
    const double mu = rng.uniform(0, 2), eta = rng.uniform(0.01, 1), beta = rng.uniform(0, 0.99);
    const auto round = static_cast<std::uint32_t>(rng.uniform_int(1, 50));
    const auto dir = trial % 2 ? CorrectionDirection::Extrapolate : CorrectionDirection::Stabilize;
    const auto r = correct(k, prev, mu, eta, beta, dir, round);

    const double a = std::min(1.0 - 1.0 / (round + 1.0), beta);
    const double sign = dir == CorrectionDirection::Extrapolate ? 1.0 : -1.0;
    const Eigen::VectorXd fk = flatten(k), fp = flatten(prev), fr = flatten(r);
    const Eigen::VectorXd corr = fk + sign * eta * mu * (fk - fp);
    const Eigen::VectorXd expect = (1 - a) * fk + a * corr;
    CHECK((fr - expect).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs((fr - fk).norm() - a * eta * mu * (fk - fp).norm()) < 1e-10);
  }
}

TEST_CASE("anchor store and aggregate_and_correct") {
  RngStream rng(7, Purpose::Test, {16});
  AnchorStore<double> anchor(filled(1.0));
  CHECK(anchor.has_anchor());
  CHECK_THROWS_AS(anchor.update(filled(1.0), 0), ProtocolError);

  DwcsConfig dwcs;
  dwcs.mu = 0.5;
  dwcs.eta = 0.1;
  const auto w = AggregationWeights::from_sizes(std::vector<std::size_t>{1, 1});
  const auto r = aggregate_and_correct(std::vector{filled(1.0), filled(3.0)}, w, anchor, dwcs, 0.01, 1);
  CHECK(all_equal(r, 2.025));
  CHECK(anchor.round() == 1);
  CHECK(anchor.anchor() == r);

  dwcs.enabled = false;
  const auto plain = aggregate_and_correct(std::vector{filled(5.0), filled(7.0)}, w, anchor, dwcs, 0.01, 2);
  CHECK(all_equal(plain, 6.0));
  CHECK(anchor.round() == 2);
  CHECK_THROWS_AS(aggregate_and_correct(std::vector{filled(5.0), filled(7.0)}, w, anchor, dwcs, 0.01, 2), ProtocolError);
}
