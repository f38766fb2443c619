#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rosfl/datagen.hpp"
#include "rosfl/fedops.hpp"
#include "rosfl/optimizer.hpp"
#include "rosfl/unet.hpp"

namespace rosfl {

enum class Method { RosFL, FedAvg, SequentialSL, Centralized };
enum class TransportKind { InProc, Tcp };
enum class Precision { F64, F32 };

std::string_view method_name(Method m);
Method parse_method(std::string_view s);
std::string_view transport_name(TransportKind t);
TransportKind parse_transport(std::string_view s);

/// Simulated cost used for the round-time comparison between RoS-FL and
/// sequential split learning.
struct TimingModel {
  double latency_ms = 5.0;
  double compute_ms_per_sample = 2.0;

  friend bool operator==(const TimingModel&, const TimingModel&) = default;
};

struct ExperimentConfig {
  Method method = Method::RosFL;
  Task task = Task::Restoration;
  std::vector<std::uint64_t> seeds{1};
  Precision precision = Precision::F64;
  TransportKind transport = TransportKind::InProc;
  int checkpoint_interval = 0;  // 0: final checkpoint only

  int clients = 4;
  int rounds = 10;
  int epochs = 1;
  int batch_size = 8;
  std::vector<Index> train_sizes{32};  // one entry applies to every client
  Index test_size = 16;

  UNetSpec model;
  SplitPlan split;
  OptimizerConfig optimizer;
  DwcsConfig dwcs;
  PhantomSpec data;
  TimingModel timing;

  Index train_size(int client) const {
    return train_sizes.size() == 1 ? train_sizes[0] : train_sizes[static_cast<std::size_t>(client)];
  }

  // Makes model/data fields that mirror each other agree (image size, classes, head).
  void sync_derived();
  void validate() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parses sectioned key/value text ("[dwcs]\nmu = 1e-6" or "dwcs.mu = 1e-6"),
/// applies defaults and validates. Errors name the offending key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& cfg);

// Every key parse_config accepts.
std::vector<std::string> config_keys();

}  // namespace rosfl
