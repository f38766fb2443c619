#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rosfl/config.hpp"
#include "rosfl/training.hpp"
#include "rosfl/transport.hpp"

namespace rosfl {

/// What a party holds at one point of a run, reported to RunOptions::observer.
struct PartyEvent {
  std::string party;  // "client<n>", "compute" or "aggregate"
  std::uint32_t round = 0;
  std::vector<std::string> param_names;
};

struct RunOptions {
  ProtocolTrace* trace = nullptr;
  Millis recv_timeout = Millis(10 * 60 * 1000);
  // Called from party threads; must be thread-safe.
  std::function<void(const PartyEvent&)> observer;
};

template <typename S>
struct Checkpoint {
  std::uint32_t round = 0;
  ParamSet<S> model;  // monolithic naming
};

/// Head and tail as one client received and passed them on in a relay turn.
template <typename S>
struct Handoff {
  std::uint32_t round = 0;
  int client = 0;
  ParamSet<S> head_in, tail_in, head_out, tail_out;
};

template <typename S>
struct RunResult {
  ParamSet<S> final_model;  // monolithic naming
  std::vector<MetricRecord> metrics;
  std::vector<Checkpoint<S>> checkpoints;
  std::vector<Handoff<S>> handoffs;  // sequential split learning only
};

// Rounds that get a checkpoint: every `interval` rounds and always the last.
bool checkpoint_due(const ExperimentConfig& cfg, std::uint32_t round);

/// RoS-FL: N client threads, one compute server (one session thread per
/// client, each with its own body replica) and one aggregation server,
/// talking only through wire messages over in-process or loopback TCP
/// channels. Throws RunError with the first failure of any party.
template <typename S>
RunResult<S> run_rosfl(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data,
                       const RunOptions& options = {});

// Whole-model federated averaging.
template <typename S>
RunResult<S> run_fedavg(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data);

// Split learning with the head and tail relayed from client to client.
template <typename S>
RunResult<S> run_sequential_sl(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data);

// One split model trained on the union of all client shards.
template <typename S>
RunResult<S> run_centralized(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data);

template <typename S>
RunResult<S> run_method(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data,
                        const RunOptions& options = {}) {
  switch (cfg.method) {
    case Method::RosFL: return run_rosfl<S>(cfg, seed, data, options);
    case Method::FedAvg: return run_fedavg<S>(cfg, seed, data);
    case Method::SequentialSL: return run_sequential_sl<S>(cfg, seed, data);
    case Method::Centralized: return run_centralized<S>(cfg, seed, data);
  }
  throw ConfigError("unknown method");
}

/// Head, body and tail with one optimizer each, trained in one process.
/// Performs the same operations in the same order as a RoS-FL client and
/// its compute session.
template <typename S>
struct SplitTrainer {
  SplitTrainer(const ExperimentConfig& cfg, std::uint64_t seed)
      : net(cfg.model, cfg.split), head_opt(cfg.optimizer), body_opt(cfg.optimizer), tail_opt(cfg.optimizer) {
    net.init(seed);
  }

  S train_batch(Task task, const Tensor<S>& x, const Tensor<S>& y) {
    auto [yh, ctx] = net.head.forward(x);
    const Tensor<S> out = net.tail.forward(net.body.forward(yh), ctx);
    const auto loss = task_loss(task, out, y);
    auto tg = net.tail.backward(loss.grad);
    const Tensor<S> gh = net.body.backward(tg.boundary);
    step(net.body, body_opt);
    net.head.backward(gh, tg.skips, std::move(ctx));
    step(net.head, head_opt);
    step(net.tail, tail_opt);
    return loss.value;
  }

  template <typename Net>
  static void step(Net& part, Optimizer<S>& opt) {
    auto p = params_of(part);
    opt.step(p, grads_of(part));
    assign_params(part, p);
  }

  ParamSet<S> model() { return merge_parts(params_of(net.head), params_of(net.body), params_of(net.tail)); }

  SplitUNet<S> net;
  Optimizer<S> head_opt, body_opt, tail_opt;
};

}  // namespace rosfl
