#include "doctest.h"

#include <mutex>
#include <set>

#include "rosfl/parties.hpp"
#include "run_support.hpp"

using namespace rosfl;
using rosfl::testing::final_metric;
using rosfl::testing::metric_at;
using rosfl::testing::tiny_config;

TEST_CASE("one client without correction is bit-exact with centralized split training") {
  for (bool adam : {false, true}) {
    auto cfg = tiny_config(Method::RosFL, 1, 3);
    if (adam) {
      cfg.optimizer.kind = OptimizerKind::Adam;
      cfg.optimizer.lr = 1e-3;
    }
    cfg.epochs = 2;
    const auto data = make_data(cfg, 4);
    const auto fl = run_rosfl<double>(cfg, 4, data);
    const auto central = run_centralized<double>(cfg, 4, data);
    CHECK(fl.final_model == central.final_model);
    for (std::uint32_t r = 0; r <= 3; ++r) CHECK(metric_at(fl.metrics, "psnr", r, 0) == metric_at(central.metrics, "psnr", r, 0));
    CHECK(metric_at(fl.metrics, "train_loss", 2, 0) == metric_at(central.metrics, "train_loss", 2, 0));
  }
}

TEST_CASE("four clients with SGD and one epoch track FedAvg") {
  const auto cfg = tiny_config(Method::RosFL, 4, 10);
  const auto data = make_data(cfg, 2);
  const auto fl = run_rosfl<double>(cfg, 2, data);
  const auto avg = run_fedavg<double>(cfg, 2, data);
  CHECK(max_abs_diff(fl.final_model, avg.final_model) < 1e-8);
}

TEST_CASE("runs are deterministic and TCP matches in-process") {
  auto cfg = tiny_config(Method::RosFL, 3, 2);
  cfg.dwcs.enabled = true;
  cfg.dwcs.mu = 0.5;
  cfg.checkpoint_interval = 1;
  const auto data = make_data(cfg, 9);
  const auto a = run_rosfl<double>(cfg, 9, data);
  const auto b = run_rosfl<double>(cfg, 9, data);
  CHECK(a.final_model == b.final_model);
  CHECK(a.metrics == b.metrics);
  REQUIRE(a.checkpoints.size() == 2);
  CHECK(a.checkpoints[1].model == a.final_model);
  CHECK(a.checkpoints[0].round == 1);

  cfg.transport = TransportKind::Tcp;
  const auto tcp = run_rosfl<double>(cfg, 9, data);
  CHECK(max_abs_diff(tcp.final_model, a.final_model) <= 1e-12);
  CHECK(tcp.metrics == a.metrics);
}

TEST_CASE("the message trace follows the protocol") {
  auto cfg = tiny_config(Method::RosFL, 3, 2);
  cfg.epochs = 2;
  cfg.train_sizes = {8, 5, 12};
  cfg.validate();
  const auto data = make_data(cfg, 1);
  ProtocolTrace trace;
  RunOptions opts;
  opts.trace = &trace;
  run_rosfl<double>(cfg, 1, data, opts);
  const auto events = trace.events();
  CHECK(validate_trace(events, TraceExpectation{3, 2, 2, {2, 2, 3}}).empty());
  CHECK_FALSE(validate_trace(events, TraceExpectation{3, 2, 2, {2, 2, 2}}).empty());

  int act_up = 0;
  for (const auto& e : events) {
    if (e.kind == MsgKind::ActUp && e.epoch > 0) ++act_up;
  }
  CHECK(act_up == 2 * 2 * (2 + 2 + 3));
}

TEST_CASE("no party ever holds another party's parameters") {
  auto cfg = tiny_config(Method::RosFL, 2, 2);
  const auto data = make_data(cfg, 3);
  std::mutex mu;
  std::vector<PartyEvent> seen;
  RunOptions opts;
  opts.observer = [&](const PartyEvent& e) {
    std::lock_guard lock(mu);
    seen.push_back(e);
  };
  run_rosfl<double>(cfg, 3, data, opts);
  std::set<std::string> parties;
  for (const auto& e : seen) {
    parties.insert(e.party);
    REQUIRE_FALSE(e.param_names.empty());
    for (const auto& name : e.param_names) {
      if (e.party == "compute") {
        CHECK(name.starts_with("body/"));
      } else {
        CHECK((name.starts_with("head/") || name.starts_with("tail/")));
      }
    }
  }
  CHECK(parties == std::set<std::string>{"aggregate", "client0", "client1", "compute"});
}

TEST_CASE("body replicas are reset to the aggregate every round") {
  auto cfg = tiny_config(Method::RosFL, 3, 3);
  cfg.optimizer.kind = OptimizerKind::Adam;
  cfg.optimizer.lr = 1e-3;
  cfg.dwcs.enabled = true;
  cfg.train_sizes = {4, 8, 12};
  cfg.validate();
  const auto data = make_data(cfg, 5);
  // The compute server compares each replica to the global body at every
  // RoundBegin and fails the run otherwise.
  const auto r = run_rosfl<double>(cfg, 5, data);
  CHECK(r.final_model.round() == 3);
}

TEST_CASE("a failing party aborts the run with its error") {
  auto cfg = tiny_config(Method::RosFL, 3, 3);
  const auto data = make_data(cfg, 5);
  RunOptions opts;
  opts.recv_timeout = Millis(20000);
  opts.observer = [](const PartyEvent& e) {
    if (e.party == "client1" && e.round == 1) throw ConfigError("injected");
  };
  try {
    run_rosfl<double>(cfg, 5, data, opts);
    FAIL("no error");
  } catch (const RunError& e) {
    CHECK(std::string(e.what()).find("client1: injected") != std::string::npos);
  }
  cfg.clients = 2;
  CHECK_THROWS_AS(run_rosfl<double>(cfg, 5, data), ConfigError);
}

TEST_CASE("FedAvg equals a hand-written two-client loop") {
  const auto cfg = tiny_config(Method::FedAvg, 2, 2);
  const auto data = make_data(cfg, 6);
  const auto avg = run_fedavg<double>(cfg, 6, data);

  auto init = build<double>(cfg.model, 6);
  auto theta = params_of(init);
  const std::vector<std::size_t> sizes{8, 8};
  for (std::uint32_t k = 1; k <= 2; ++k) {
    std::vector<ParamSet<double>> locals;
    for (std::uint64_t c = 0; c < 2; ++c) {
      UNet<double> net(cfg.model);
      assign_params(net, theta);
      for (const auto& idx : epoch_batches(8, 4, 6, c, k, 1)) {
        const auto out = net.forward(gather(data.train[c].inputs, idx));
        const auto target = gather(data.train[c].targets, idx);
        net.backward(Tensord(out.shape(), (2.0 / static_cast<double>(out.size())) * (out.values() - target.values())));
        auto p = params_of(net);
        const auto g = grads_of(net);
        for (std::size_t i = 0; i < p.size(); ++i) p[i].value.values() -= 0.05 * g[i].value.values();
        assign_params(net, p);
      }
      locals.push_back(params_of(net));
    }
    theta = aggregate(locals, AggregationWeights::from_sizes(sizes));
  }
  CHECK(max_abs_diff(avg.final_model, theta) == 0.0);
}

TEST_CASE("sequential split learning relays head and tail between clients") {
  auto one = tiny_config(Method::SequentialSL, 1, 2);
  const auto data1 = make_data(one, 8);
  CHECK(run_sequential_sl<double>(one, 8, data1).final_model == run_centralized<double>(one, 8, data1).final_model);

  const auto cfg = tiny_config(Method::SequentialSL, 3, 2);
  const auto data = make_data(cfg, 8);
  const auto sl = run_sequential_sl<double>(cfg, 8, data);
  REQUIRE(sl.handoffs.size() == 6);
  for (std::size_t i = 0; i < sl.handoffs.size(); ++i) {
    CHECK(sl.handoffs[i].client == static_cast<int>(i % 3));
    CHECK_FALSE(sl.handoffs[i].head_in == sl.handoffs[i].head_out);
    if (i > 0) {
      CHECK(sl.handoffs[i].head_in == sl.handoffs[i - 1].head_out);
      CHECK(sl.handoffs[i].tail_in == sl.handoffs[i - 1].tail_out);
    }
  }
}

TEST_CASE("simulated round time of the relay grows with the number of clients") {
  for (int n : {2, 4}) {
    const auto cfg = tiny_config(Method::RosFL, n, 1);
    const auto data = make_data(cfg, 1);
    const double fl = metric_at(run_rosfl<double>(cfg, 1, data).metrics, "sim_round_ms", 1);
    const double sl = metric_at(run_sequential_sl<double>(cfg, 1, data).metrics, "sim_round_ms", 1);
    CHECK(sl / fl == doctest::Approx(n).epsilon(0.2));
  }
}

TEST_CASE("centralized training lowers the loss on a toy task") {
  auto cfg = tiny_config(Method::Centralized, 2, 8);
  const auto data = make_data(cfg, 3);
  const auto r = run_centralized<double>(cfg, 3, data);
  CHECK(metric_at(r.metrics, "train_loss", 8, 0) < metric_at(r.metrics, "train_loss", 1, 0));
  CHECK(metric_at(r.metrics, "eval_loss", 8) < metric_at(r.metrics, "eval_loss", 0));
}

TEST_CASE("single precision runs end to end") {
  const auto cfg = tiny_config(Method::RosFL, 2, 2);
  const auto data = make_data(cfg, 3);
  const auto f = run_rosfl<float>(cfg, 3, data);
  const auto d = run_rosfl<double>(cfg, 3, data);
  CHECK(max_abs_diff(f.final_model.cast<double>(), d.final_model) < 1e-3);
  CHECK(std::abs(final_metric(f.metrics, "psnr") - final_metric(d.metrics, "psnr")) < 0.1);
}

TEST_CASE("FedAvg on identical full-batch shards equals centralized training on one shard") {
  auto cfg = tiny_config(Method::FedAvg, 3, 4);
  cfg.batch_size = 8;
  const auto one_shard = make_data(tiny_config(Method::Centralized, 1, 4), 7);
  FederatedData copies;
  for (int c = 0; c < 3; ++c) {
    copies.train.push_back(one_shard.train[0]);
    copies.test.push_back(one_shard.test[0]);
  }
  auto central_cfg = tiny_config(Method::Centralized, 1, 4);
  central_cfg.batch_size = 8;
  const auto avg = run_fedavg<double>(cfg, 7, copies);
  const auto central = run_centralized<double>(central_cfg, 7, one_shard);
  CHECK(max_abs_diff(avg.final_model, central.final_model) < 1e-10);
}
