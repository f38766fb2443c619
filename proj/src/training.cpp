#include "rosfl/training.hpp"

#include <random>
#include <set>

namespace rosfl {

FederatedData make_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  FederatedData d;
  for (int n = 0; n < cfg.clients; ++n) {
    const auto client = static_cast<std::uint64_t>(n);
    d.train.push_back(gen_shard(cfg.task, cfg.data, seed, client, cfg.train_size(n), Split::Train));
    d.test.push_back(gen_shard(cfg.task, cfg.data, seed, client, cfg.test_size, Split::Test));
  }
  return d;
}

Dataset union_of(const std::vector<Dataset>& shards) {
  if (shards.empty()) throw ConfigError("union of zero shards");
  Index total = 0;
  for (const auto& s : shards) total += s.size();
  Shape shape = shards[0].inputs.shape();
  shape[0] = total;
  Dataset out{Tensord(shape), Tensord(shape), {}};
  Index at = 0;
  for (const auto& s : shards) {
    out.inputs.values().segment(at, s.inputs.size()) = s.inputs.values();
    out.targets.values().segment(at, s.targets.size()) = s.targets.values();
    at += s.inputs.size();
    out.noise += s.noise;
  }
  return out;
}

std::vector<std::vector<Index>> epoch_batches(Index samples, int batch_size, std::uint64_t seed, std::uint64_t client,
                                              std::uint32_t round, std::uint16_t epoch) {
  std::vector<Index> order(static_cast<std::size_t>(samples));
  std::iota(order.begin(), order.end(), Index{0});
  RngStream rng(seed, Purpose::Shuffle, {client, round, epoch});
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<Index>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::vector<Index>> eval_batches(Index samples, int batch_size) {
  std::vector<std::vector<Index>> out;
  for (Index i = 0; i < samples; i += batch_size) {
    std::vector<Index> b;
    for (Index j = i; j < std::min(samples, i + batch_size); ++j) b.push_back(j);
    out.push_back(std::move(b));
  }
  return out;
}

void MetricSink::add(std::uint32_t round, int client, const std::string& name, double value) {
  std::lock_guard lock(mu_);
  rows_.push_back({round, client, name, value});
}

void MetricSink::add_all(std::uint32_t round, int client, const std::map<std::string, double>& values) {
  std::lock_guard lock(mu_);
  for (const auto& [name, value] : values) rows_.push_back({round, client, name, value});
}

std::vector<MetricRecord> MetricSink::records() const {
  std::lock_guard lock(mu_);
  return rows_;
}

std::vector<MetricRecord> finalize_metrics(std::vector<MetricRecord> rows, const TimingModel& timing,
                                           Schedule schedule) {
  std::sort(rows.begin(), rows.end(), [](const MetricRecord& a, const MetricRecord& b) {
    return std::tie(a.round, a.client, a.name) < std::tie(b.round, b.client, b.name);
  });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].round == rows[i - 1].round && rows[i].client == rows[i - 1].client && rows[i].name == rows[i - 1].name) {
      throw ProtocolError("duplicate metric " + rows[i].name + " for round " + std::to_string(rows[i].round));
    }
  }

  struct Acc {
    double sum = 0, lo = 1e300, hi = -1e300;
    int count = 0;
  };
  std::map<std::pair<std::uint32_t, std::string>, Acc> acc;
  std::map<std::uint32_t, std::map<int, double>> cost;
  for (const auto& r : rows) {
    if (r.client < 0) continue;
    auto& a = acc[{r.round, r.name}];
    a.sum += r.value;
    a.lo = std::min(a.lo, r.value);
    a.hi = std::max(a.hi, r.value);
    ++a.count;
    if (r.name == "train_messages") cost[r.round][r.client] += r.value * timing.latency_ms;
    if (r.name == "train_samples") cost[r.round][r.client] += r.value * timing.compute_ms_per_sample;
  }
  std::vector<MetricRecord> global;
  for (const auto& [key, a] : acc) {
    global.push_back({key.first, -1, key.second, a.sum / a.count});
    if (key.second == "psnr") global.push_back({key.first, -1, "psnr_spread", a.hi - a.lo});
  }
  for (const auto& [round, per_client] : cost) {
    double t = 0;
    for (const auto& [client, ms] : per_client) t = schedule == Schedule::Parallel ? std::max(t, ms) : t + ms;
    global.push_back({round, -1, "sim_round_ms", t});
  }
  rows.insert(rows.end(), global.begin(), global.end());
  std::stable_sort(rows.begin(), rows.end(), [](const MetricRecord& a, const MetricRecord& b) {
    return std::tie(a.round, a.client, a.name) < std::tie(b.round, b.client, b.name);
  });
  return rows;
}

void record_data_metrics(MetricSink& sink, const ExperimentConfig& cfg, const FederatedData& data) {
  for (std::size_t n = 0; n < data.test.size(); ++n) {
    const int client = static_cast<int>(n);
    if (cfg.task == Task::Restoration) {
      sink.add(0, client, "input_psnr", cap_psnr(psnr(data.test[n].inputs, data.test[n].targets)));
      NoiseStats both = data.train[n].noise;
      both += data.test[n].noise;
      sink.add(0, client, "noise_clamp_rate", both.clamp_rate());
    }
  }
}

}  // namespace rosfl
