#pragma once

#include <algorithm>
#include <map>
#include <mutex>
#include <numeric>
#include <vector>

#include "rosfl/config.hpp"
#include "rosfl/datagen.hpp"
#include "rosfl/metrics.hpp"

namespace rosfl {

struct FederatedData {
  std::vector<Dataset> train;
  std::vector<Dataset> test;
};

FederatedData make_data(const ExperimentConfig& cfg, std::uint64_t seed);

// Concatenates the client training shards in client order.
Dataset union_of(const std::vector<Dataset>& shards);

/// Shuffled minibatches for one epoch, drawn from (seed, Shuffle, client,
/// round, epoch). The last batch may be short.
std::vector<std::vector<Index>> epoch_batches(Index samples, int batch_size, std::uint64_t seed, std::uint64_t client,
                                              std::uint32_t round, std::uint16_t epoch);

// Evaluation batches in order, no shuffling.
std::vector<std::vector<Index>> eval_batches(Index samples, int batch_size);

template <typename S>
Tensor<S> batch_of(const Tensord& t, const std::vector<Index>& idx) {
  if constexpr (std::is_same_v<S, double>) {
    return gather(t, idx);
  } else {
    return gather(t, idx).template cast<S>();
  }
}

template <typename S>
LossResult<S> task_loss(Task task, const Tensor<S>& out, const Tensor<S>& target) {
  return task == Task::Restoration ? mse_loss(out, target) : segmentation_loss(out, target);
}

/// Runs `forward(batch_index, inputs)` over the test set and scores the
/// stacked predictions: eval_loss plus psnr (restoration) or foreground
/// dice and jaccard (segmentation).
template <typename S, typename Forward>
std::map<std::string, double> evaluate(Task task, int classes, const Dataset& test, int batch_size, Forward&& forward) {
  const auto batches = eval_batches(test.size(), batch_size);
  Tensord pred;
  Index row = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Tensor<S> out = forward(static_cast<std::uint32_t>(b), batch_of<S>(test.inputs, batches[b]));
    if (pred.empty()) {
      Shape shape = out.shape();
      shape[0] = test.size();
      pred = Tensord(shape);
      row = out.size() / out.dim(0);
    }
    const Index start = batches[b].front() * row;
    for (Index i = 0; i < out.size(); ++i) pred[start + i] = static_cast<double>(out[i]);
  }
  std::map<std::string, double> m;
  if (task == Task::Restoration) {
    m["eval_loss"] = mse(pred, test.targets);
    m["psnr"] = cap_psnr(psnr(pred, test.targets));
  } else {
    m["eval_loss"] = segmentation_loss(pred, test.targets).value;
    const Tensord labels = argmax_mask(pred);
    m["dice"] = mean_foreground_dice(labels, test.targets, classes);
    m["jaccard"] = mean_foreground_jaccard(labels, test.targets, classes);
  }
  return m;
}

/// Thread-safe collector of per-client metric rows.
class MetricSink {
 public:
  void add(std::uint32_t round, int client, const std::string& name, double value);
  void add_all(std::uint32_t round, int client, const std::map<std::string, double>& values);
  std::vector<MetricRecord> records() const;

 private:
  mutable std::mutex mu_;
  std::vector<MetricRecord> rows_;
};

enum class Schedule { Parallel, Sequential };

/// Sorts per-client rows and appends global rows: the client mean of every
/// metric, psnr_spread (max - min over clients), and sim_round_ms from the
/// timing model, where clients overlap (Parallel) or take turns
/// (Sequential).
std::vector<MetricRecord> finalize_metrics(std::vector<MetricRecord> rows, const TimingModel& timing,
                                           Schedule schedule);

// Per-client round-0 rows describing the data: input quality and clamp rate.
void record_data_metrics(MetricSink& sink, const ExperimentConfig& cfg, const FederatedData& data);

}  // namespace rosfl
