#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rosfl/rng.hpp"
#include "rosfl/tensor.hpp"

namespace rosfl {

/// Photon count and electronic noise variance of the low-dose simulation.
/// In oracle mode the Poisson draw is replaced by its mean and the
/// electronic noise is dropped.
struct NoiseConfig {
  double i0 = 1e6;
  double sigma_e2 = 10.0;
  bool oracle = false;

  void validate() const;
};

struct NoiseStats {
  std::uint64_t draws = 0;
  std::uint64_t clamped = 0;

  double clamp_rate() const { return draws == 0 ? 0.0 : static_cast<double>(clamped) / static_cast<double>(draws); }
  NoiseStats& operator+=(const NoiseStats& o) {
    draws += o.draws;
    clamped += o.clamped;
    return *this;
  }
};

// One line integral: p = ln(I0 / (Poisson(I0 e^-p_hat) + Normal(0, sigma_e2))).
// Measurements below 1 are floored at 1 and counted in stats.
double simulate_low_dose(double p_hat, const NoiseConfig& cfg, RngStream& rng, NoiseStats* stats = nullptr);
Tensord simulate_low_dose(const Tensord& p_hat, const NoiseConfig& cfg, RngStream& rng, NoiseStats* stats = nullptr);

enum class Task { Restoration, Segmentation };

struct PhantomSpec {
  Index size = 32;
  int min_shapes = 2;
  int max_shapes = 5;
  double edge_softness = 0.08;

  // restoration
  double attenuation_scale = 10.0;
  double sigma_e2 = 10.0;
  // Scales the simulated noise in the image domain, standing in for the
  // amplification a reconstruction from projections would add.
  double noise_gain = 20.0;
  std::vector<double> doses{1e5, 1e6, 5e4, 1.25e5};

  // segmentation
  int classes = 3;
  std::vector<double> contrast{1.0, 0.7, 1.3, 0.85};
  std::vector<double> bias{0.0, 0.1, -0.1, 0.05};
  double seg_noise = 0.1;

  void validate() const;
  double dose(std::size_t client) const { return doses[client % doses.size()]; }
  double client_contrast(std::size_t client) const { return contrast[client % contrast.size()]; }
  double client_bias(std::size_t client) const { return bias[client % bias.size()]; }

  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

/// Stacked samples: inputs and targets are (N,1,H,W). Segmentation targets
/// hold class indices.
struct Dataset {
  Tensord inputs;
  Tensord targets;
  NoiseStats noise;

  Index size() const { return inputs.empty() ? 0 : inputs.dim(0); }
};

enum class Split { Train, Test };

// Clean soft-edged phantom in [0,1] for (seed, split, client, index).
Tensord phantom(const PhantomSpec& spec, std::uint64_t seed, Split split, std::uint64_t client, std::uint64_t index);

Dataset gen_restoration_shard(const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client, Index count,
                              Split split = Split::Train);
Dataset gen_segmentation_shard(const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client, Index count,
                               Split split = Split::Train);
Dataset gen_shard(Task task, const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client, Index count,
                  Split split = Split::Train);

// Rows `idx` of an (N,...) tensor, in the given order.
Tensord gather(const Tensord& t, std::span<const Index> idx);

/// Writes <dir>/<name>.ckpt (records "inputs", "targets") and
/// <dir>/<name>.json (counts, seed, client, spec).
void export_shard(const std::filesystem::path& dir, const std::string& name, const Dataset& data, Task task,
                  const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client);
Dataset import_shard(const std::filesystem::path& dir, const std::string& name);

}  // namespace rosfl
