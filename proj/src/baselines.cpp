#include "rosfl/parties.hpp"

namespace rosfl {

namespace {

void require_shards(const ExperimentConfig& cfg, const FederatedData& data) {
  cfg.validate();
  if (data.train.size() != static_cast<std::size_t>(cfg.clients) || data.test.size() != data.train.size()) {
    throw ConfigError("data has " + std::to_string(data.train.size()) + " shards for " + std::to_string(cfg.clients) +
                      " clients");
  }
}

AggregationWeights weights_for(const FederatedData& data) {
  std::vector<std::size_t> sizes;
  for (const auto& d : data.train) sizes.push_back(static_cast<std::size_t>(d.size()));
  return AggregationWeights::from_sizes(sizes);
}

struct RoundTally {
  double loss_sum = 0;
  int batches = 0;
  Index samples = 0;

  void add(double loss, Index n) {
    loss_sum += loss;
    ++batches;
    samples += n;
  }

  void write(MetricSink& sink, std::uint32_t round, int client, double messages) const {
    sink.add(round, client, "train_loss", loss_sum / std::max(batches, 1));
    sink.add(round, client, "train_messages", messages);
    sink.add(round, client, "train_samples", static_cast<double>(samples));
  }
};

template <typename S>
RoundTally train_split(SplitTrainer<S>& t, const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train,
                       std::uint64_t stream_client, std::uint32_t round) {
  RoundTally tally;
  for (int e = 1; e <= cfg.epochs; ++e) {
    for (const auto& idx :
         epoch_batches(train.size(), cfg.batch_size, seed, stream_client, round, static_cast<std::uint16_t>(e))) {
      const auto x = batch_of<S>(train.inputs, idx);
      tally.add(static_cast<double>(t.train_batch(cfg.task, x, batch_of<S>(train.targets, idx))), x.dim(0));
    }
  }
  return tally;
}

template <typename S>
void evaluate_split(SplitTrainer<S>& t, const ExperimentConfig& cfg, const FederatedData& data, MetricSink& sink,
                    std::uint32_t round) {
  for (std::size_t c = 0; c < data.test.size(); ++c) {
    sink.add_all(round, static_cast<int>(c),
                 evaluate<S>(cfg.task, cfg.data.classes, data.test[c], cfg.batch_size,
                             [&](std::uint32_t, const Tensor<S>& x) { return t.net.forward(x); }));
  }
}

template <typename S>
RunResult<S> finish(MetricSink& sink, const ExperimentConfig& cfg, const FederatedData& data, Schedule schedule,
                    RunResult<S> result) {
  record_data_metrics(sink, cfg, data);
  result.metrics = finalize_metrics(sink.records(), cfg.timing, schedule);
  return result;
}

}  // namespace

template <typename S>
RunResult<S> run_fedavg(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data) {
  require_shards(cfg, data);
  const auto weights = weights_for(data);
  const auto rounds = static_cast<std::uint32_t>(cfg.rounds);
  UNet<S> global = build<S>(cfg.model, seed);
  ParamSet<S> theta = params_of(global);
  std::vector<UNet<S>> nets(static_cast<std::size_t>(cfg.clients), global);
  std::vector<Optimizer<S>> opts(static_cast<std::size_t>(cfg.clients), Optimizer<S>(cfg.optimizer));
  MetricSink sink;
  RunResult<S> result;

  for (std::uint32_t k = 1; k <= rounds + 1; ++k) {
    for (int c = 0; c < cfg.clients; ++c) {
      auto& net = nets[static_cast<std::size_t>(c)];
      assign_params(net, theta);
      sink.add_all(k - 1, c,
                   evaluate<S>(cfg.task, cfg.data.classes, data.test[static_cast<std::size_t>(c)], cfg.batch_size,
                               [&](std::uint32_t, const Tensor<S>& x) { return net.forward(x); }));
    }
    if (k == rounds + 1) break;
    std::vector<ParamSet<S>> locals;
    for (int c = 0; c < cfg.clients; ++c) {
      auto& net = nets[static_cast<std::size_t>(c)];
      auto& opt = opts[static_cast<std::size_t>(c)];
      const auto& train = data.train[static_cast<std::size_t>(c)];
      RoundTally tally;
      for (int e = 1; e <= cfg.epochs; ++e) {
        for (const auto& idx : epoch_batches(train.size(), cfg.batch_size, seed, static_cast<std::uint64_t>(c), k,
                                             static_cast<std::uint16_t>(e))) {
          const auto x = batch_of<S>(train.inputs, idx);
          const auto loss = task_loss(cfg.task, net.forward(x), batch_of<S>(train.targets, idx));
          net.backward(loss.grad);
          SplitTrainer<S>::step(net, opt);
          tally.add(static_cast<double>(loss.value), x.dim(0));
        }
      }
      tally.write(sink, k, c, 2.0);
      locals.push_back(params_of(net));
    }
    theta = aggregate(locals, weights);
    theta.set_round(k);
    if (checkpoint_due(cfg, k)) result.checkpoints.push_back({k, theta});
  }
  result.final_model = theta;
  return finish(sink, cfg, data, Schedule::Parallel, std::move(result));
}

template <typename S>
RunResult<S> run_sequential_sl(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data) {
  require_shards(cfg, data);
  const auto rounds = static_cast<std::uint32_t>(cfg.rounds);
  SplitTrainer<S> t(cfg, seed);
  std::vector<Optimizer<S>> head_opts(static_cast<std::size_t>(cfg.clients), Optimizer<S>(cfg.optimizer));
  std::vector<Optimizer<S>> tail_opts = head_opts;
  MetricSink sink;
  RunResult<S> result;

  for (std::uint32_t k = 1; k <= rounds + 1; ++k) {
    evaluate_split(t, cfg, data, sink, k - 1);
    if (k == rounds + 1) break;
    for (int c = 0; c < cfg.clients; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      Handoff<S> h{k, c, params_of(t.net.head), params_of(t.net.tail), {}, {}};
      std::swap(t.head_opt, head_opts[ci]);
      std::swap(t.tail_opt, tail_opts[ci]);
      const auto tally = train_split(t, cfg, seed, data.train[ci], static_cast<std::uint64_t>(c), k);
      std::swap(t.head_opt, head_opts[ci]);
      std::swap(t.tail_opt, tail_opts[ci]);
      tally.write(sink, k, c, 4.0 * tally.batches + 2.0);
      h.head_out = params_of(t.net.head);
      h.tail_out = params_of(t.net.tail);
      result.handoffs.push_back(std::move(h));
    }
    if (checkpoint_due(cfg, k)) result.checkpoints.push_back({k, t.model()});
  }
  result.final_model = t.model();
  result.final_model.set_round(rounds);
  return finish(sink, cfg, data, Schedule::Sequential, std::move(result));
}

template <typename S>
RunResult<S> run_centralized(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data) {
  require_shards(cfg, data);
  const auto rounds = static_cast<std::uint32_t>(cfg.rounds);
  const Dataset all = union_of(data.train);
  SplitTrainer<S> t(cfg, seed);
  MetricSink sink;
  RunResult<S> result;

  for (std::uint32_t k = 1; k <= rounds + 1; ++k) {
    evaluate_split(t, cfg, data, sink, k - 1);
    if (k == rounds + 1) break;
    train_split(t, cfg, seed, all, 0, k).write(sink, k, 0, 0.0);
    if (checkpoint_due(cfg, k)) result.checkpoints.push_back({k, t.model()});
  }
  result.final_model = t.model();
  result.final_model.set_round(rounds);
  return finish(sink, cfg, data, Schedule::Sequential, std::move(result));
}

#define ROSFL_INSTANTIATE(S)                                                                                   \
  template RunResult<S> run_fedavg<S>(const ExperimentConfig&, std::uint64_t, const FederatedData&);          \
  template RunResult<S> run_sequential_sl<S>(const ExperimentConfig&, std::uint64_t, const FederatedData&);   \
  template RunResult<S> run_centralized<S>(const ExperimentConfig&, std::uint64_t, const FederatedData&);

ROSFL_INSTANTIATE(double)
ROSFL_INSTANTIATE(float)

}  // namespace rosfl
