#include "rosfl/runner.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace rosfl {

namespace fs = std::filesystem;

fs::path output_root(const std::optional<std::string>& explicit_root) {
  if (explicit_root && !explicit_root->empty()) return *explicit_root;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string label_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

void write_metrics_csv(const fs::path& path, const std::vector<MetricRecord>& rows) {
  std::string out = "round,client,name,value\n";
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw NumericError("metric " + r.name + " is not finite");
    out += std::to_string(r.round) + "," + (r.client < 0 ? std::string("global") : std::to_string(r.client)) + "," +
           r.name + "," + format_double(r.value) + "\n";
  }
  write_text(path, out);
}

std::vector<MetricRecord> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "round,client,name,value") {
    throw ConfigError(path.string() + ": bad header");
  }
  std::vector<MetricRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string round, client, name, value;
    if (!std::getline(ss, round, ',') || !std::getline(ss, client, ',') || !std::getline(ss, name, ',') ||
        !std::getline(ss, value)) {
      throw ConfigError(path.string() + ": malformed row: " + line);
    }
    try {
      rows.push_back({static_cast<std::uint32_t>(std::stoul(round)), client == "global" ? -1 : std::stoi(client), name,
                      std::stod(value)});
    } catch (const std::logic_error&) {
      throw ConfigError(path.string() + ": malformed row: " + line);
    }
  }
  return rows;
}

std::optional<double> tail_mean(const std::vector<MetricRecord>& rows, const std::string& name, int window) {
  std::map<std::uint32_t, double> by_round;
  for (const auto& r : rows) {
    if (r.client == -1 && r.name == name) by_round[r.round] = r.value;
  }
  if (by_round.empty()) return std::nullopt;
  double sum = 0;
  int n = 0;
  for (auto it = by_round.rbegin(); it != by_round.rend() && n < window; ++it, ++n) sum += it->second;
  return sum / n;
}

nlohmann::json summarize(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                         const std::vector<std::vector<MetricRecord>>& per_seed) {
  std::set<std::string> names;
  for (const auto& rows : per_seed) {
    for (const auto& r : rows) {
      if (r.client == -1) names.insert(r.name);
    }
  }
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& name : names) {
    std::vector<double> values;
    for (const auto& rows : per_seed) {
      if (auto v = tail_mean(rows, name)) values.push_back(*v);
    }
    double mean = 0;
    for (double v : values) mean += v;
    metrics[name] = {{"mean", mean / static_cast<double>(values.size())}, {"per_seed", values}};
  }
  return {{"method", std::string(method_name(cfg.method))},
          {"task", cfg.task == Task::Restoration ? "restoration" : "segmentation"},
          {"seeds", seeds},
          {"clients", cfg.clients},
          {"rounds", cfg.rounds},
          {"epochs", cfg.epochs},
          {"statistic", "mean over seeds of the final-5-round mean of the global row"},
          {"metrics", metrics}};
}

namespace {

// Client-wise mean over seeds, row by row.
std::vector<MetricRecord> seed_mean(const std::vector<std::vector<MetricRecord>>& per_seed) {
  std::map<std::tuple<std::uint32_t, int, std::string>, std::pair<double, int>> acc;
  for (const auto& rows : per_seed) {
    for (const auto& r : rows) {
      auto& a = acc[{r.round, r.client, r.name}];
      a.first += r.value;
      ++a.second;
    }
  }
  std::vector<MetricRecord> out;
  for (const auto& [key, a] : acc) {
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), a.first / a.second});
  }
  return out;
}

template <typename S>
std::vector<MetricRecord> run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir,
                                   const RunOptions& options) {
  const auto data = make_data(cfg, seed);
  const auto result = run_method<S>(cfg, seed, data, options);
  const auto seed_dir = dir / ("seed_" + std::to_string(seed));
  for (const auto& ck : result.checkpoints) {
    save_checkpoint(seed_dir / "checkpoints" / ("round_" + std::to_string(ck.round) + ".ckpt"),
                    part_records(cfg, ck.model));
  }
  save_checkpoint(seed_dir / "checkpoints" / "final.ckpt", part_records(cfg, result.final_model));
  write_metrics_csv(seed_dir / "metrics.csv", result.metrics);
  return result.metrics;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& dir, const RunOptions& options) {
  cfg.validate();
  fs::create_directories(dir);
  write_text(dir / "config.ini", serialize_config(cfg));
  std::string seeds;
  for (auto s : cfg.seeds) seeds += std::to_string(s) + "\n";
  write_text(dir / "seeds.txt", seeds);

  ExperimentResult out;
  out.dir = dir;
  for (auto seed : cfg.seeds) {
    out.per_seed.push_back(cfg.precision == Precision::F64 ? run_seed<double>(cfg, seed, dir, options)
                                                           : run_seed<float>(cfg, seed, dir, options));
  }
  write_metrics_csv(dir / "metrics.csv", seed_mean(out.per_seed));
  out.summary = summarize(cfg, cfg.seeds, out.per_seed);
  write_text(dir / "summary.json", out.summary.dump(2) + "\n");
  return out;
}

std::vector<std::string> validate_run_dir(const fs::path& dir) {
  std::vector<std::string> problems;
  for (const char* f : {"config.ini", "seeds.txt", "metrics.csv", "summary.json"}) {
    if (!fs::is_regular_file(dir / f)) problems.push_back(std::string("missing ") + f);
  }
  if (!problems.empty()) return problems;
  try {
    const auto cfg = load_config(dir / "config.ini");
    std::ifstream seeds_in(dir / "seeds.txt");
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s; seeds_in >> s;) seeds.push_back(s);
    if (seeds != cfg.seeds) problems.push_back("seeds.txt does not match the config seeds");
    for (auto s : seeds) {
      const auto sd = dir / ("seed_" + std::to_string(s));
      if (!fs::is_regular_file(sd / "metrics.csv")) problems.push_back("missing " + (sd / "metrics.csv").string());
      if (!fs::is_regular_file(sd / "checkpoints" / "final.ckpt")) {
        problems.push_back("missing " + (sd / "checkpoints" / "final.ckpt").string());
      }
    }
  } catch (const std::exception& e) {
    problems.push_back(std::string("config.ini: ") + e.what());
  }
  try {
    if (read_metrics_csv(dir / "metrics.csv").empty()) problems.push_back("metrics.csv has no rows");
  } catch (const std::exception& e) {
    problems.push_back(e.what());
  }
  try {
    std::ifstream in(dir / "summary.json");
    const auto j = nlohmann::json::parse(in);
    if (!j.contains("metrics") || !j["metrics"].is_object()) problems.push_back("summary.json lacks metrics");
  } catch (const std::exception& e) {
    problems.push_back(std::string("summary.json: ") + e.what());
  }
  return problems;
}

nlohmann::json run_sweep(const std::vector<SweepCell>& cells, const fs::path& root) {
  if (cells.empty()) throw ConfigError("sweep has no cells");
  nlohmann::json table = nlohmann::json::array();
  bool all_ok = true;
  for (const auto& cell : cells) {
    nlohmann::json row = {{"label", cell.label}};
    try {
      row["summary"] = run_experiment(cell.cfg, root / cell.label).summary;
      row["ok"] = true;
    } catch (const std::exception& e) {
      row["ok"] = false;
      row["error"] = e.what();
      all_ok = false;
    }
    table.push_back(row);
  }
  nlohmann::json out = {{"cells", table}, {"all_ok", all_ok}};
  fs::create_directories(root);
  write_text(root / "sweep.json", out.dump(2) + "\n");
  return out;
}

std::vector<SweepCell> mu_sweep_cells(const ExperimentConfig& base, const std::vector<double>& mus) {
  if (mus.empty()) throw ConfigError("mu list is empty");
  std::vector<SweepCell> cells;
  for (double mu : mus) {
    auto cfg = base;
    cfg.dwcs.enabled = true;
    cfg.dwcs.mu = mu;
    cells.push_back({"mu_" + label_number(mu), cfg});
  }
  return cells;
}

std::vector<SweepCell> round_epoch_cells(const ExperimentConfig& base, const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty()) throw ConfigError("round/epoch list is empty");
  std::vector<SweepCell> cells;
  for (auto [r, e] : pairs) {
    auto cfg = base;
    cfg.rounds = r;
    cfg.epochs = e;
    cells.push_back({"R" + std::to_string(r) + "_E" + std::to_string(e), cfg});
  }
  return cells;
}

}  // namespace rosfl
