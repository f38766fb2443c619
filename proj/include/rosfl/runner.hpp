#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rosfl/parties.hpp"

namespace rosfl {

// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "ROSFL_OUTPUT_ROOT";

/// `explicit_root` if given, else $ROSFL_OUTPUT_ROOT, else ./runs.
std::filesystem::path output_root(const std::optional<std::string>& explicit_root = std::nullopt);

/// Writes metrics rows as CSV with header round,client,name,value. The
/// global rows use the client label "global".
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRecord>& rows);
std::vector<MetricRecord> read_metrics_csv(const std::filesystem::path& path);

/// Mean of a global metric over its last `window` rounds.
std::optional<double> tail_mean(const std::vector<MetricRecord>& rows, const std::string& name, int window = 5);

/// Per metric: the mean over seeds of the final-5-round average of the
/// global row, plus the per-seed values.
nlohmann::json summarize(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                         const std::vector<std::vector<MetricRecord>>& per_seed);

struct ExperimentResult {
  std::filesystem::path dir;
  nlohmann::json summary;
  std::vector<std::vector<MetricRecord>> per_seed;  // in cfg.seeds order
};

/// Runs every seed of `cfg` and writes the run directory:
///   config.ini, seeds.txt, metrics.csv (seed-averaged), summary.json,
///   seed_<s>/metrics.csv and seed_<s>/checkpoints/round_<k>.ckpt holding
///   head/, body/ and tail/ records.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                const RunOptions& options = {});

// Missing or malformed run-directory contents; empty when complete.
std::vector<std::string> validate_run_dir(const std::filesystem::path& dir);

/// Part-prefixed checkpoint records of a monolithic model.
template <typename S>
std::vector<TensorRecord> part_records(const ExperimentConfig& cfg, const ParamSet<S>& full) {
  SplitUNet<S> net(cfg.model, cfg.split);
  std::vector<TensorRecord> out;
  for (const auto& p : {extract_part(net.head, full), extract_part(net.body, full), extract_part(net.tail, full)}) {
    const auto recs = to_records(p, dtype_of<S>());
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

struct SweepCell {
  std::string label;
  ExperimentConfig cfg;
};

/// Runs each cell into <root>/<label>, continuing past failed cells.
/// Returns {"cells": [{label, ok, error | summary}], "all_ok": bool}.
nlohmann::json run_sweep(const std::vector<SweepCell>& cells, const std::filesystem::path& root);

// DWCS enabled with each mu in turn.
std::vector<SweepCell> mu_sweep_cells(const ExperimentConfig& base, const std::vector<double>& mus);

// (rounds, epochs) pairs, normally with a constant product.
std::vector<SweepCell> round_epoch_cells(const ExperimentConfig& base, const std::vector<std::pair<int, int>>& pairs);

}  // namespace rosfl
