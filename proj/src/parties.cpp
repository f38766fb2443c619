#include "rosfl/parties.hpp"

#include <condition_variable>
#include <exception>
#include <map>
#include <thread>

namespace rosfl {

bool checkpoint_due(const ExperimentConfig& cfg, std::uint32_t round) {
  if (round == static_cast<std::uint32_t>(cfg.rounds)) return true;
  return cfg.checkpoint_interval > 0 && round % static_cast<std::uint32_t>(cfg.checkpoint_interval) == 0;
}

namespace {

std::string client_name(int n) { return "client" + std::to_string(n); }

template <typename S>
std::vector<std::string> names_of(const ParamSet<S>& p) {
  std::vector<std::string> out;
  for (const auto& e : p) out.push_back(e.name);
  return out;
}

// Head then tail records in one parameter set, as carried by the weight kinds.
template <typename S>
ParamSet<S> client_parts(const ParamSet<S>& head, const ParamSet<S>& tail) {
  ParamSet<S> out(Part::Full, head.round());
  for (const auto* p : {&head, &tail}) {
    for (const auto& e : *p) out.add(e.name, e.value);
  }
  return out;
}

template <typename S>
std::pair<ParamSet<S>, ParamSet<S>> split_client_parts(const WireMessage& m) {
  std::vector<TensorRecord> head, tail;
  for (const auto& r : m.payload) {
    if (r.name.starts_with("head/")) {
      head.push_back(r);
    } else if (r.name.starts_with("tail/")) {
      tail.push_back(r);
    } else {
      throw ProtocolError("weights record " + r.name + " is neither head nor tail");
    }
  }
  return {from_records<S>(head, Part::Head, m.round), from_records<S>(tail, Part::Tail, m.round)};
}

std::string describe(const WireMessage& m) {
  return std::string(kind_name(m.kind)) + "(round " + std::to_string(m.round) + ", client " +
         std::to_string(m.client) + ", epoch " + std::to_string(m.epoch) + ", batch " + std::to_string(m.batch) + ")";
}

WireMessage receive(Channel& ch, Millis timeout, const std::string& from) {
  auto m = ch.recv(timeout);
  if (!m) throw ProtocolError("channel from " + from + " closed unexpectedly");
  return std::move(*m);
}

WireMessage expect(Channel& ch, Millis timeout, const std::string& from, MsgKind kind, std::uint32_t round,
                   std::uint16_t client, std::uint16_t epoch = 0, std::uint32_t batch = 0) {
  auto m = receive(ch, timeout, from);
  if (m.kind != kind || m.round != round || m.client != client || m.epoch != epoch || m.batch != batch) {
    const WireMessage want{kWireVersion, kind, round, client, epoch, batch, {}};
    throw ProtocolError("expected " + describe(want) + " from " + from + ", got " + describe(m));
  }
  return m;
}

/// Cyclic barrier whose last arrival runs a completion step before anyone
/// is released. abort() wakes all waiters with RunError.
class RoundBarrier {
 public:
  explicit RoundBarrier(int parties) : parties_(parties) {}

  void arrive_and_wait(const std::function<void()>& completion) {
    std::unique_lock lock(mu_);
    if (broken_) throw RunError("round barrier aborted");
    const std::uint64_t gen = generation_;
    if (++arrived_ == parties_) {
      try {
        completion();
      } catch (...) {
        broken_ = true;
        cv_.notify_all();
        throw;
      }
      arrived_ = 0;
      ++generation_;
      cv_.notify_all();
      return;
    }
    cv_.wait(lock, [&] { return generation_ != gen || broken_; });
    if (generation_ == gen) throw RunError("round barrier aborted");
  }

  void abort() {
    std::lock_guard lock(mu_);
    broken_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int parties_;
  int arrived_ = 0;
  std::uint64_t generation_ = 0;
  bool broken_ = false;
};

// First failure of any party; later failures are consequences of the abort.
class FailureState {
 public:
  void add_channel(Channel* ch) { channels_.push_back(ch); }
  void set_barrier(RoundBarrier* b) { barrier_ = b; }

  void fail(const std::string& party, std::exception_ptr e) {
    {
      std::lock_guard lock(mu_);
      if (!error_) {
        error_ = e;
        party_ = party;
      }
    }
    if (barrier_) barrier_->abort();
    for (auto* ch : channels_) ch->close();
  }

  void rethrow() const {
    if (!error_) return;
    try {
      std::rethrow_exception(error_);
    } catch (const std::exception& e) {
      throw RunError(party_ + ": " + e.what());
    }
  }

 private:
  std::mutex mu_;
  std::exception_ptr error_;
  std::string party_;
  std::vector<Channel*> channels_;
  RoundBarrier* barrier_ = nullptr;
};

struct Links {
  // Indexed by client: the client end and the server end of each link.
  std::vector<ChannelPtr> client_compute, compute_client, client_agg, agg_client;
};

void hello_handshake(std::vector<ChannelPtr>& client_ends, std::vector<ChannelPtr>& server_ends,
                     const std::function<ChannelPtr()>& accept, Millis timeout) {
  const auto n = client_ends.size();
  for (std::size_t c = 0; c < n; ++c) {
    client_ends[c]->send(control_message(MsgKind::Hello, 0, static_cast<std::uint16_t>(c)));
  }
  std::vector<ChannelPtr> ordered(n);
  for (std::size_t i = 0; i < n; ++i) {
    ChannelPtr ch = accept ? accept() : std::move(server_ends[i]);
    const auto hello = receive(*ch, timeout, "new connection");
    if (hello.kind != MsgKind::Hello || hello.client >= n || ordered[hello.client]) {
      throw ProtocolError("bad handshake: " + describe(hello));
    }
    ordered[hello.client] = std::move(ch);
  }
  server_ends = std::move(ordered);
}

Links connect(const ExperimentConfig& cfg, Millis timeout) {
  const auto n = static_cast<std::size_t>(cfg.clients);
  Links l;
  l.client_compute.resize(n);
  l.compute_client.resize(n);
  l.client_agg.resize(n);
  l.agg_client.resize(n);
  if (cfg.transport == TransportKind::InProc) {
    for (std::size_t c = 0; c < n; ++c) {
      std::tie(l.client_compute[c], l.compute_client[c]) = inproc_pair();
      std::tie(l.client_agg[c], l.agg_client[c]) = inproc_pair();
    }
    hello_handshake(l.client_compute, l.compute_client, nullptr, timeout);
    hello_handshake(l.client_agg, l.agg_client, nullptr, timeout);
    return l;
  }
  TcpListener compute_listener, agg_listener;
  for (std::size_t c = 0; c < n; ++c) {
    l.client_compute[c] = tcp_connect("127.0.0.1", compute_listener.port());
    l.client_agg[c] = tcp_connect("127.0.0.1", agg_listener.port());
  }
  hello_handshake(l.client_compute, l.compute_client, [&] { return compute_listener.accept(timeout); }, timeout);
  hello_handshake(l.client_agg, l.agg_client, [&] { return agg_listener.accept(timeout); }, timeout);
  return l;
}

void trace_links(Links& l, ProtocolTrace& trace) {
  for (std::size_t c = 0; c < l.client_compute.size(); ++c) {
    const auto name = client_name(static_cast<int>(c));
    l.client_compute[c] = traced(std::move(l.client_compute[c]), trace, name, "compute");
    l.compute_client[c] = traced(std::move(l.compute_client[c]), trace, "compute", name);
    l.client_agg[c] = traced(std::move(l.client_agg[c]), trace, name, "aggregate");
    l.agg_client[c] = traced(std::move(l.agg_client[c]), trace, "aggregate", name);
  }
}

template <typename S>
class RosflRun {
 public:
  RosflRun(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data, const RunOptions& options)
      : cfg_(cfg),
        seed_(seed),
        data_(data),
        options_(options),
        n_(cfg.clients),
        rounds_(static_cast<std::uint32_t>(cfg.rounds)),
        weights_(AggregationWeights::from_sizes(train_sizes(data))),
        barrier_(cfg.clients) {}

  RunResult<S> run() {
    Links links = connect(cfg_, options_.recv_timeout);
    if (options_.trace) trace_links(links, *options_.trace);
    for (auto* group : {&links.client_compute, &links.compute_client, &links.client_agg, &links.agg_client}) {
      for (auto& ch : *group) failure_.add_channel(ch.get());
    }
    failure_.set_barrier(&barrier_);

    BodyNet<S> init_body(cfg_.model, cfg_.split);
    init_body.init(seed_);
    global_body_ = params_of(init_body);
    body_anchor_ = AnchorStore<S>(global_body_);
    replicas_.assign(static_cast<std::size_t>(n_), init_body);

    std::vector<std::thread> threads;
    auto guarded = [this](std::string party, auto body) {
      return [this, party = std::move(party), body]() mutable {
        try {
          body();
        } catch (...) {
          failure_.fail(party, std::current_exception());
        }
      };
    };
    threads.emplace_back(guarded("aggregate", [&] { aggregation_server(links.agg_client); }));
    for (int c = 0; c < n_; ++c) {
      threads.emplace_back(guarded("compute", [&, c] { compute_session(c, *links.compute_client[c]); }));
      threads.emplace_back(guarded(client_name(c), [&, c] {
        client(c, *links.client_compute[c], *links.client_agg[c]);
      }));
    }
    for (auto& t : threads) t.join();
    failure_.rethrow();

    RunResult<S> result;
    result.final_model = merge_parts(final_head_, global_body_, final_tail_);
    for (const auto& [round, ht] : agg_checkpoints_) {
      result.checkpoints.push_back({round, merge_parts(ht.first, body_checkpoints_.at(round), ht.second)});
    }
    record_data_metrics(sink_, cfg_, data_);
    result.metrics = finalize_metrics(sink_.records(), cfg_.timing, Schedule::Parallel);
    return result;
  }

 private:
  static std::vector<std::size_t> train_sizes(const FederatedData& data) {
    std::vector<std::size_t> out;
    for (const auto& d : data.train) out.push_back(static_cast<std::size_t>(d.size()));
    return out;
  }

  void observe(std::string party, std::uint32_t round, std::vector<std::string> names) {
    if (options_.observer) options_.observer(PartyEvent{std::move(party), round, std::move(names)});
  }

  void aggregation_server(std::vector<ChannelPtr>& clients) {
    HeadNet<S> head_net(cfg_.model, cfg_.split);
    TailNet<S> tail_net(cfg_.model, cfg_.split);
    head_net.init(seed_);
    tail_net.init(seed_);
    ParamSet<S> head = params_of(head_net), tail = params_of(tail_net);
    AnchorStore<S> head_anchor(head), tail_anchor(tail);

    for (std::uint32_t k = 1; k <= rounds_ + 1; ++k) {
      const auto both = client_parts(head, tail);
      observe("aggregate", k - 1, names_of(both));
      for (int c = 0; c < n_; ++c) {
        clients[static_cast<std::size_t>(c)]->send(
            weights_message(MsgKind::WeightsDown, k, static_cast<std::uint16_t>(c), both));
      }
      if (k == rounds_ + 1) break;
      std::vector<ParamSet<S>> heads, tails;
      for (int c = 0; c < n_; ++c) {
        const auto m = expect(*clients[static_cast<std::size_t>(c)], options_.recv_timeout, client_name(c),
                              MsgKind::WeightsUp, k, static_cast<std::uint16_t>(c));
        auto [h, t] = split_client_parts<S>(m);
        require_same_layout(head, h, "WeightsUp head");
        require_same_layout(tail, t, "WeightsUp tail");
        heads.push_back(std::move(h));
        tails.push_back(std::move(t));
      }
      head = aggregate_and_correct(heads, weights_, head_anchor, cfg_.dwcs, cfg_.optimizer.lr, k);
      tail = aggregate_and_correct(tails, weights_, tail_anchor, cfg_.dwcs, cfg_.optimizer.lr, k);
      if (checkpoint_due(cfg_, k)) agg_checkpoints_[k] = {head, tail};
    }
    final_head_ = head;
    final_tail_ = tail;
    for (int c = 0; c < n_; ++c) {
      clients[static_cast<std::size_t>(c)]->send(control_message(MsgKind::Shutdown, rounds_ + 1, static_cast<std::uint16_t>(c)));
    }
  }

  // Runs with every session parked in the barrier.
  void finish_body_round(std::uint32_t k) {
    std::vector<ParamSet<S>> locals;
    for (auto& r : replicas_) locals.push_back(params_of(r));
    global_body_ = aggregate_and_correct(locals, weights_, body_anchor_, cfg_.dwcs, cfg_.optimizer.lr, k);
    for (auto& r : replicas_) assign_params(r, global_body_);
    if (checkpoint_due(cfg_, k)) body_checkpoints_[k] = global_body_;
  }

  void compute_session(int c, Channel& ch) {
    const auto id = static_cast<std::uint16_t>(c);
    const auto from = client_name(c);
    BodyNet<S>& replica = replicas_[static_cast<std::size_t>(c)];
    Optimizer<S> opt(cfg_.optimizer);
    std::uint32_t round = 0;
    bool in_round = false;
    for (;;) {
      const auto m = receive(ch, options_.recv_timeout, from);
      if (m.client != id) throw ProtocolError("compute session " + from + " got " + describe(m));
      switch (m.kind) {
        case MsgKind::RoundBegin: {
          if (in_round || m.round != round + 1) throw ProtocolError("unexpected " + describe(m));
          round = m.round;
          in_round = true;
          const auto local = params_of(replica);
          if (!(local == global_body_) || body_anchor_.round() != round - 1) {
            throw ProtocolError("body replica for " + from + " does not equal the global body at round " +
                                std::to_string(round));
          }
          observe("compute", round - 1, names_of(local));
          break;
        }
        case MsgKind::ActUp: {
          if (!in_round || m.round != round) throw ProtocolError("unexpected " + describe(m));
          const auto y = replica.forward(single_tensor<S>(m));
          ch.send(tensor_message(MsgKind::ActDown, round, id, m.epoch, m.batch, y));
          break;
        }
        case MsgKind::GradUp: {
          if (!in_round || m.round != round || m.epoch == 0) throw ProtocolError("unexpected " + describe(m));
          const auto g = replica.backward(single_tensor<S>(m));
          SplitTrainer<S>::step(replica, opt);
          ch.send(tensor_message(MsgKind::GradDown, round, id, m.epoch, m.batch, g));
          break;
        }
        case MsgKind::RoundEnd: {
          if (!in_round || m.round != round || round > rounds_) throw ProtocolError("unexpected " + describe(m));
          in_round = false;
          barrier_.arrive_and_wait([this, round] { finish_body_round(round); });
          break;
        }
        case MsgKind::Shutdown:
          if (round != rounds_ + 1) throw ProtocolError("shutdown before the final evaluation: " + describe(m));
          return;
        default:
          throw ProtocolError("compute server cannot handle " + describe(m));
      }
    }
  }

  void client(int c, Channel& compute, Channel& agg) {
    const auto id = static_cast<std::uint16_t>(c);
    const auto& train = data_.train[static_cast<std::size_t>(c)];
    const auto& test = data_.test[static_cast<std::size_t>(c)];
    HeadNet<S> head(cfg_.model, cfg_.split);
    TailNet<S> tail(cfg_.model, cfg_.split);
    Optimizer<S> head_opt(cfg_.optimizer), tail_opt(cfg_.optimizer);
    const auto timeout = options_.recv_timeout;

    for (std::uint32_t k = 1;; ++k) {
      const auto m = receive(agg, timeout, "aggregate");
      if (m.kind == MsgKind::Shutdown && k == rounds_ + 2) {
        compute.send(control_message(MsgKind::Shutdown, rounds_ + 1, id));
        return;
      }
      if (m.kind != MsgKind::WeightsDown || m.round != k || m.client != id) {
        throw ProtocolError(client_name(c) + " expected WeightsDown for round " + std::to_string(k) + ", got " +
                            describe(m));
      }
      const auto [h, t] = split_client_parts<S>(m);
      assign_params(head, h);
      assign_params(tail, t);
      observe(client_name(c), k - 1, names_of(client_parts(h, t)));
      compute.send(control_message(MsgKind::RoundBegin, k, id));

      const auto scores = evaluate<S>(cfg_.task, cfg_.data.classes, test, cfg_.batch_size,
                                      [&](std::uint32_t b, const Tensor<S>& x) {
                                        auto [yh, ctx] = head.forward(x);
                                        compute.send(tensor_message(MsgKind::ActUp, k, id, 0, b, yh));
                                        const auto down = expect(compute, timeout, "compute", MsgKind::ActDown, k, id, 0, b);
                                        return tail.forward(single_tensor<S>(down), ctx);
                                      });
      sink_.add_all(k - 1, c, scores);
      if (k == rounds_ + 1) continue;

      double loss_sum = 0;
      int batches = 0;
      Index samples = 0;
      for (int e = 1; e <= cfg_.epochs; ++e) {
        const auto epoch = static_cast<std::uint16_t>(e);
        const auto plan = epoch_batches(train.size(), cfg_.batch_size, seed_, static_cast<std::uint64_t>(c), k, epoch);
        for (std::size_t b = 0; b < plan.size(); ++b) {
          const auto bi = static_cast<std::uint32_t>(b);
          const auto x = batch_of<S>(train.inputs, plan[b]);
          const auto y = batch_of<S>(train.targets, plan[b]);
          auto [yh, ctx] = head.forward(x);
          compute.send(tensor_message(MsgKind::ActUp, k, id, epoch, bi, yh));
          const auto down = expect(compute, timeout, "compute", MsgKind::ActDown, k, id, epoch, bi);
          const auto out = tail.forward(single_tensor<S>(down), ctx);
          const auto loss = task_loss(cfg_.task, out, y);
          auto tg = tail.backward(loss.grad);
          compute.send(tensor_message(MsgKind::GradUp, k, id, epoch, bi, tg.boundary));
          const auto gd = expect(compute, timeout, "compute", MsgKind::GradDown, k, id, epoch, bi);
          head.backward(single_tensor<S>(gd), tg.skips, std::move(ctx));
          SplitTrainer<S>::step(head, head_opt);
          SplitTrainer<S>::step(tail, tail_opt);
          loss_sum += static_cast<double>(loss.value);
          ++batches;
          samples += x.dim(0);
        }
      }
      sink_.add(k, c, "train_loss", loss_sum / std::max(batches, 1));
      sink_.add(k, c, "train_messages", 4.0 * batches + 2.0);
      sink_.add(k, c, "train_samples", static_cast<double>(samples));

      compute.send(control_message(MsgKind::RoundEnd, k, id));
      auto up = client_parts(params_of(head), params_of(tail));
      agg.send(weights_message(MsgKind::WeightsUp, k, id, up));
    }
  }

  const ExperimentConfig& cfg_;
  std::uint64_t seed_;
  const FederatedData& data_;
  const RunOptions& options_;
  int n_;
  std::uint32_t rounds_;
  AggregationWeights weights_;
  RoundBarrier barrier_;
  FailureState failure_;
  MetricSink sink_;

  std::vector<BodyNet<S>> replicas_;
  ParamSet<S> global_body_;
  AnchorStore<S> body_anchor_;
  std::map<std::uint32_t, ParamSet<S>> body_checkpoints_;

  ParamSet<S> final_head_, final_tail_;
  std::map<std::uint32_t, std::pair<ParamSet<S>, ParamSet<S>>> agg_checkpoints_;
};

}  // namespace

template <typename S>
RunResult<S> run_rosfl(const ExperimentConfig& cfg, std::uint64_t seed, const FederatedData& data,
                       const RunOptions& options) {
  cfg.validate();
  if (data.train.size() != static_cast<std::size_t>(cfg.clients) || data.test.size() != data.train.size()) {
    throw ConfigError("data has " + std::to_string(data.train.size()) + " shards for " + std::to_string(cfg.clients) +
                      " clients");
  }
  if (cfg.clients > 0xFFFF) throw ConfigError("schedule.clients must fit in 16 bits");
  return RosflRun<S>(cfg, seed, data, options).run();
}

template RunResult<double> run_rosfl<double>(const ExperimentConfig&, std::uint64_t, const FederatedData&,
                                             const RunOptions&);
template RunResult<float> run_rosfl<float>(const ExperimentConfig&, std::uint64_t, const FederatedData&,
                                           const RunOptions&);

}  // namespace rosfl
