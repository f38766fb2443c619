#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "rosfl/runner.hpp"

using namespace rosfl;

namespace {

// The positional method wins over the file; the file may omit it.
ExperimentConfig load_with_method(const std::string& path, std::optional<std::string> method) {
  const auto bytes = read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  ExperimentConfig cfg;
  try {
    cfg = parse_config(text);
  } catch (const ConfigError& e) {
    if (!method || std::string(e.what()).find("missing required key: method") == std::string::npos) throw;
    cfg = parse_config("method = " + *method + "\n" + text);
  }
  if (method) cfg.method = parse_method(*method);
  return cfg;
}

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw ConfigError("not a number: " + item);
    }
  }
  return out;
}

// "1x500,2x250" -> {(1, 500), (2, 250)}
std::vector<std::pair<int, int>> parse_pairs(const std::string& list) {
  std::vector<std::pair<int, int>> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto x = item.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument(item);
      out.emplace_back(std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1)));
    } catch (const std::logic_error&) {
      throw ConfigError("expected ROUNDSxEPOCHS, got " + item);
    }
  }
  return out;
}

void print_summary(const nlohmann::json& summary) {
  for (const auto& [name, m] : summary["metrics"].items()) {
    std::cout << "  " << name << " = " << m["mean"].get<double>() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-federated training of U-shaped networks"};
  app.require_subcommand(1);

  std::string method, config_path, transport, out_dir, mus = "1e-6,1e-4,1,100", pairs = "1x500,2x250,4x125,5x100";
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run one experiment (all configured seeds)");
  run->add_option("method", method, "rosfl | fedavg | sl | central")->required();
  run->add_option("--config", config_path, "Config file")->required();
  run->add_option("--transport", transport, "inproc | tcp");
  run->add_option("--seed", seed, "Run a single seed instead of the configured list");
  run->add_option("--out", out_dir, "Run directory (default: $" + std::string(kOutputRootEnv) + "/<method>)");

  auto* sweep_mu = app.add_subcommand("sweep-mu", "DWCS on, one cell per mu");
  sweep_mu->add_option("--config", config_path, "Base config file")->required();
  sweep_mu->add_option("--mu", mus, "Comma-separated mu values");
  sweep_mu->add_option("--out", out_dir, "Sweep directory");

  auto* sweep_re = app.add_subcommand("sweep-re", "One cell per (rounds, epochs) pair");
  sweep_re->add_option("--config", config_path, "Base config file")->required();
  sweep_re->add_option("--pairs", pairs, "Comma-separated ROUNDSxEPOCHS pairs");
  sweep_re->add_option("--out", out_dir, "Sweep directory");

  auto* validate = app.add_subcommand("validate-config", "Parse and validate a config file");
  validate->add_option("config", config_path, "Config file")->required();

  std::string run_dir;
  auto* check_run = app.add_subcommand("validate-run", "Check a run directory for required outputs");
  check_run->add_option("dir", run_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) {
      const auto cfg = load_with_method(config_path, std::nullopt);
      std::cout << serialize_config(cfg);
      return 0;
    }
    if (check_run->parsed()) {
      const auto problems = validate_run_dir(run_dir);
      for (const auto& p : problems) std::cerr << p << "\n";
      return problems.empty() ? 0 : 1;
    }
    if (run->parsed()) {
      auto cfg = load_with_method(config_path, method);
      if (!transport.empty()) cfg.transport = parse_transport(transport);
      if (seed) cfg.seeds = {*seed};
      cfg.validate();
      const auto dir = out_dir.empty() ? output_root() / std::string(method_name(cfg.method)) : std::filesystem::path(out_dir);
      const auto result = run_experiment(cfg, dir);
      std::cout << "wrote " << dir.string() << "\n";
      print_summary(result.summary);
      const auto problems = validate_run_dir(dir);
      for (const auto& p : problems) std::cerr << p << "\n";
      return problems.empty() ? 0 : 1;
    }
    const auto base = load_with_method(config_path, std::nullopt);
    const bool is_mu = sweep_mu->parsed();
    const auto cells = is_mu ? mu_sweep_cells(base, parse_doubles(mus)) : round_epoch_cells(base, parse_pairs(pairs));
    const auto root = out_dir.empty() ? output_root() / (is_mu ? "sweep-mu" : "sweep-re") : std::filesystem::path(out_dir);
    const auto table = run_sweep(cells, root);
    for (const auto& cell : table["cells"]) {
      std::cout << cell["label"].get<std::string>() << (cell["ok"].get<bool>() ? "" : " FAILED") << "\n";
      if (cell["ok"].get<bool>()) {
        print_summary(cell["summary"]);
      } else {
        std::cout << "  " << cell["error"].get<std::string>() << "\n";
      }
    }
    return table["all_ok"].get<bool>() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
