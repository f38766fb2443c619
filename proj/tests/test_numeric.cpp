#include "doctest.h"

#include <cmath>

#include "rosfl/gradcheck.hpp"
#include "rosfl/layers.hpp"
#include "rosfl/optimizer.hpp"
#include "rosfl/rng.hpp"
#include "support.hpp"

using namespace rosfl;
using rosfl::testing::check_concat;
using rosfl::testing::check_layer;
using rosfl::testing::random_distinct;
using rosfl::testing::random_nonzero;
using rosfl::testing::random_tensor;

TEST_CASE("relu forward clamps negatives") {
  Relu<double> relu;
  Tensord x({1, 1, 1, 3});
  x[0] = -1, x[1] = 0, x[2] = 2;
  const auto y = relu.forward(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);
}

TEST_CASE("relu backward gates by cached input") {
  Relu<double> relu;
  Tensord x({1, 1, 1, 2});
  x[0] = -1, x[1] = 2;
  relu.forward(x);
  const auto g = relu.backward(Tensord::constant({1, 1, 1, 2}, 5.0));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 5.0);
}

TEST_CASE("conv3x3 with identity kernel is the identity") {
  RngStream rng(7, Purpose::Test, {1});
  Conv3x3<double> conv("c", 3, 3);
  conv.weight().values().setZero();
  for (Index c = 0; c < 3; ++c) conv.weight().at(c, c, 1, 1) = 1.0;
  const auto x = random_tensor(rng, {2, 3, 5, 4});
  CHECK(conv.forward(x) == x);
}

TEST_CASE("maxpool2x2 on a ramp picks block maxima") {
  Tensord x({1, 1, 4, 4});
  for (Index i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  MaxPool2x2<double> pool;
  const auto y = pool.forward(x);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  for (Index by = 0; by < 2; ++by) {
    for (Index bx = 0; bx < 2; ++bx) {
      double best = -1;
      for (Index dy = 0; dy < 2; ++dy)
        for (Index dx = 0; dx < 2; ++dx) best = std::max(best, x.at(0, 0, 2 * by + dy, 2 * bx + dx));
      CHECK(y.at(0, 0, by, bx) == best);
    }
  }
}

TEST_CASE("upsample doubles spatial extent and concat sums channels") {
  RngStream rng(1, Purpose::Test, {2});
  Upsample2x<double> up;
  const auto y = up.forward(random_tensor(rng, {2, 3, 4, 5}));
  CHECK(y.shape() == Shape{2, 3, 8, 10});
  ConcatChannels<double> cat;
  const auto z = cat.forward(random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 5, 4, 4}));
  CHECK(z.shape() == Shape{2, 8, 4, 4});
}

TEST_CASE("concat backward splits along channels") {
  RngStream rng(3, Purpose::Test, {3});
  ConcatChannels<double> cat;
  const auto a = random_tensor(rng, {2, 2, 3, 3});
  const auto b = random_tensor(rng, {2, 3, 3, 3});
  const auto y = cat.forward(a, b);
  auto [ga, gb] = cat.backward(y);
  CHECK(ga == a);
  CHECK(gb == b);
}

TEST_CASE("backward before forward is a protocol error") {
  Conv3x3<double> conv("c", 1, 1);
  Relu<double> relu;
  MaxPool2x2<double> pool;
  const Tensord g({1, 1, 2, 2});
  CHECK_THROWS_AS(conv.backward(g), ProtocolError);
  CHECK_THROWS_AS(relu.backward(g), ProtocolError);
  CHECK_THROWS_AS(pool.backward(g), ProtocolError);
  // The cache is consumed by the first backward.
  relu.forward(g);
  relu.backward(g);
  CHECK_THROWS_AS(relu.backward(g), ProtocolError);
}

TEST_CASE("shape mismatches and non-finite outputs are rejected") {
  Conv3x3<double> conv("c", 2, 4);
  CHECK_THROWS_AS(conv.forward(Tensord({1, 3, 4, 4})), ConfigError);
  MaxPool2x2<double> pool;
  CHECK_THROWS_AS(pool.forward(Tensord({1, 1, 3, 4})), ConfigError);
  Relu<double> relu;
  auto bad = Tensord({1, 1, 1, 2});
  bad[1] = std::nan("");
  CHECK_THROWS_AS(relu.forward(bad), NumericError);
}

TEST_CASE("finite differences of simple functions") {
  ParamSet<double> p;
  p.add("theta", Tensord::constant({1}, 3.0));
  std::function<double(const ParamSet<double>&)> square = [](const ParamSet<double>& q) {
    return q[0].value[0] * q[0].value[0];
  };
  CHECK(std::abs(finite_diff_grad(square, p, 1e-5)[0].value[0] - 6.0) < 1e-8);

  std::function<double(const ParamSet<double>&)> constant = [](const ParamSet<double>&) { return 4.2; };
  CHECK(finite_diff_grad(constant, p, 1e-5)[0].value[0] == 0.0);
  CHECK_THROWS_AS(finite_diff_grad(constant, p, 1e-2), ConfigError);
}

TEST_CASE("two-layer net gradients match finite differences") {
  RngStream rng(11, Purpose::Test, {4});
  Conv3x3<double> c1("c1", 2, 3);
  Relu<double> r;
  Conv1x1<double> c2("c2", 3, 2);
  c1.init(5);
  c2.init(5);
  const auto x = random_tensor(rng, {2, 2, 4, 4});
  const auto w = random_tensor(rng, {2, 2, 4, 4});
  c2.forward(r.forward(c1.forward(x)));
  c1.backward(r.backward(c2.backward(w)));

  ParamSet<double> params, analytic;
  auto collect = [&](auto& layer) {
    layer.for_each_param([&](const std::string& n, Tensord& v, Tensord& g) {
      params.add(n, v);
      analytic.add(n, g);
    });
  };
  collect(c1);
  collect(c2);
  std::function<double(const ParamSet<double>&)> loss = [&](const ParamSet<double>& p) {
    c1.weight() = p[0].value;
    c1.bias() = p[1].value;
    c2.weight() = p[2].value;
    c2.bias() = p[3].value;
    return c2.forward(r.forward(c1.forward(x))).values().dot(w.values());
  };
  const auto numeric = finite_diff_grad(loss, params, 1e-5);
  CHECK(relative_error(analytic, numeric) < 1e-6);
}

TEST_CASE("every layer kind passes the gradient check on random shapes") {
  RngStream rng(2024, Purpose::Test, {5});
  for (int trial = 0; trial < 4; ++trial) {
    const Index n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 3), c2 = rng.uniform_int(1, 3);
    const Index h = 2 * rng.uniform_int(1, 3), w = 2 * rng.uniform_int(1, 3);
    Conv3x3<double> c3("c3", c, c2);
    c3.init(static_cast<std::uint64_t>(trial));
    c3.bias() = random_tensor(rng, {c2});
    auto g3 = check_layer(c3, random_tensor(rng, {n, c, h, w}), rng);
    CHECK(g3.param_rel_error < 1e-6);
    CHECK(g3.input_rel_error < 1e-6);

    Conv1x1<double> c1("c1", c, c2);
    c1.init(static_cast<std::uint64_t>(trial));
    auto g1 = check_layer(c1, random_tensor(rng, {n, c, h, w}), rng);
    CHECK(g1.param_rel_error < 1e-6);
    CHECK(g1.input_rel_error < 1e-6);

    Relu<double> relu;
    CHECK(check_layer(relu, random_nonzero(rng, {n, c, h, w}), rng).input_rel_error < 1e-6);
    MaxPool2x2<double> pool;
    CHECK(check_layer(pool, random_distinct(rng, {n, c, h, w}), rng).input_rel_error < 1e-6);
    Upsample2x<double> up;
    CHECK(check_layer(up, random_tensor(rng, {n, c, h, w}), rng).input_rel_error < 1e-6);
    ChannelSoftmax<double> sm;
    CHECK(check_layer(sm, random_tensor(rng, {n, c + 1, h, w}), rng).input_rel_error < 1e-6);
    CHECK(check_concat(random_tensor(rng, {n, c, h, w}), random_tensor(rng, {n, c2, h, w}), rng) < 1e-6);
  }
}

TEST_CASE("forward and backward are bit-deterministic") {
  RngStream rng(9, Purpose::Test, {6});
  Conv3x3<double> conv("c", 3, 4);
  conv.init(1);
  const auto x = random_tensor(rng, {2, 3, 6, 6});
  const auto g = random_tensor(rng, {2, 4, 6, 6});
  const auto y1 = conv.forward(x);
  const auto d1 = conv.backward(g);
  const auto w1 = conv.grad_weight();
  const auto y2 = conv.forward(x);
  const auto d2 = conv.backward(g);
  CHECK(y1 == y2);
  CHECK(d1 == d2);
  CHECK(w1 == conv.grad_weight());
}

TEST_CASE("generic layer variant dispatches forward and backward") {
  Layer<double> layer = Conv1x1<double>("p", 2, 1);
  CHECK(kind_of(layer) == LayerKind::Conv1x1);
  const auto y = forward(layer, Tensord::constant({1, 2, 2, 2}, 1.0));
  const auto grads = backward(layer, Tensord::constant(y.shape(), 1.0));
  CHECK(grads.input_grad.shape() == Shape{1, 2, 2, 2});
  REQUIRE(grads.param_grads.size() == 2);
  CHECK(grads.param_grads[1].value[0] == 4.0);  // bias gradient sums 4 pixels
}

TEST_CASE("weight init is uniform within fan-in bound and seeded") {
  Conv3x3<double> a("enc1.conv_a", 4, 8), b("enc1.conv_a", 4, 8);
  a.init(3);
  b.init(3);
  CHECK(a.weight() == b.weight());
  const double bound = std::sqrt(1.0 / 36.0);
  CHECK(a.weight().values().cwiseAbs().maxCoeff() <= bound);
  CHECK(a.bias().values().isZero());
  b.init(4);
  CHECK_FALSE(a.weight() == b.weight());
}

TEST_CASE("sgd step substitutes directly") {
  Optimizer<double> opt({OptimizerKind::Sgd, 0.1, 0.0});
  ParamSet<double> p, g;
  p.add("t", Tensord::constant({1}, 1.0));
  g.add("t", Tensord::constant({1}, 2.0));
  CHECK(optimizer_step(opt, p, g)[0].value[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("zero gradient with zero weight decay leaves parameters unchanged") {
  RngStream rng(1, Purpose::Test, {7});
  for (auto kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
    Optimizer<double> opt({kind, 1e-3, 0.0});
    ParamSet<double> p, g;
    p.add("w", random_tensor(rng, {3, 4}));
    g.add("w", Tensord({3, 4}));
    const auto before = p;
    opt.step(p, g);
    CHECK(p == before);
  }
}

TEST_CASE("adam first step moves by the learning rate") {
  Optimizer<double> opt({OptimizerKind::Adam, 1e-4, 0.0});
  ParamSet<double> p, g;
  p.add("t", Tensord::constant({1}, 0.0));
  g.add("t", Tensord::constant({1}, 1.0));
  opt.step(p, g);
  CHECK(p[0].value[0] == doctest::Approx(-1e-4).epsilon(1e-7));
  CHECK(opt.steps() == 1);
  opt.step(p, g);
  CHECK(opt.steps() == 2);
}

TEST_CASE("optimizer rejects mismatched gradients") {
  Optimizer<double> opt;
  ParamSet<double> p, g;
  p.add("t", Tensord({2}));
  g.add("t", Tensord({3}));
  CHECK_THROWS_AS(opt.step(p, g), ConfigError);
}

TEST_CASE("rng streams are reproducible and distinct per address") {
  RngStream a(42, Purpose::Shuffle, {1, 2}), b(42, Purpose::Shuffle, {1, 2}), c(42, Purpose::Shuffle, {2, 1});
  std::vector<double> va, vb, vc;
  for (int i = 0; i < 16; ++i) {
    va.push_back(a.uniform());
    vb.push_back(b.uniform());
    vc.push_back(c.uniform());
  }
  CHECK(va == vb);
  CHECK(va != vc);
}
