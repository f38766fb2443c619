#include "rosfl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "rosfl/container.hpp"
#include "rosfl/errors.hpp"

namespace rosfl {

void NoiseConfig::validate() const {
  if (!(i0 > 0) || !std::isfinite(i0)) throw ConfigError("noise.i0 must be positive, got " + std::to_string(i0));
  if (!(sigma_e2 >= 0)) throw ConfigError("noise.sigma_e2 must be non-negative, got " + std::to_string(sigma_e2));
}

double simulate_low_dose(double p_hat, const NoiseConfig& cfg, RngStream& rng, NoiseStats* stats) {
  if (!(p_hat >= 0) || !std::isfinite(p_hat)) {
    throw ConfigError("attenuation must be finite and non-negative, got " + std::to_string(p_hat));
  }
  const double expected = cfg.i0 * std::exp(-p_hat);
  double measured = expected;
  if (!cfg.oracle) {
    measured = rng.poisson(expected);
    if (cfg.sigma_e2 > 0) measured += rng.normal(0.0, std::sqrt(cfg.sigma_e2));
  }
  if (stats) ++stats->draws;
  if (measured < 1.0) {
    measured = 1.0;
    if (stats) ++stats->clamped;
  }
  // ln(I0 / measured), evaluated relative to the expected count.
  return p_hat - std::log(measured / expected);
}

Tensord simulate_low_dose(const Tensord& p_hat, const NoiseConfig& cfg, RngStream& rng, NoiseStats* stats) {
  cfg.validate();
  Tensord out(p_hat.shape());
  for (Index i = 0; i < p_hat.size(); ++i) out[i] = simulate_low_dose(p_hat[i], cfg, rng, stats);
  return out;
}

void PhantomSpec::validate() const {
  if (size < 4) throw ConfigError("data.image_size must be at least 4");
  if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("data.min_shapes/max_shapes out of range");
  if (!(edge_softness > 0)) throw ConfigError("data.edge_softness must be positive");
  if (!(attenuation_scale > 0)) throw ConfigError("data.attenuation_scale must be positive");
  if (!(noise_gain > 0)) throw ConfigError("data.noise_gain must be positive");
  if (!(sigma_e2 >= 0)) throw ConfigError("data.sigma_e2 must be non-negative");
  if (doses.empty()) throw ConfigError("data.doses must not be empty");
  for (double d : doses) {
    if (!(d > 0)) throw ConfigError("data.doses must be positive");
  }
  if (classes < 2) throw ConfigError("data.classes must be at least 2");
  if (contrast.empty() || bias.empty()) throw ConfigError("data.contrast and data.bias must not be empty");
  if (!(seg_noise >= 0)) throw ConfigError("data.seg_noise must be non-negative");
}

namespace {

struct Ellipse {
  double cx, cy, rx, ry, angle;
};

Ellipse random_ellipse(RngStream& rng, double lo, double hi) {
  return {rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(lo, hi), rng.uniform(lo, hi),
          rng.uniform(0.0, std::numbers::pi)};
}

// Normalised radius: < 1 inside, 1 on the boundary.
double radius(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double u = (c * dx + s * dy) / e.rx, v = (-s * dx + c * dy) / e.ry;
  return std::sqrt(u * u + v * v);
}

double pixel_centre(Index i, Index n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n); }

Purpose purpose_of(Split split) { return split == Split::Train ? Purpose::TrainData : Purpose::TestData; }

void put_sample(Tensord& dst, Index row, const Tensord& img) {
  std::copy(img.data(), img.data() + img.size(), dst.data() + row * img.size());
}

}  // namespace

Tensord phantom(const PhantomSpec& spec, std::uint64_t seed, Split split, std::uint64_t client, std::uint64_t index) {
  RngStream rng(seed, purpose_of(split), {client, index, 0});
  const Index n = spec.size;
  Tensord img({1, 1, n, n});
  const Ellipse body{0.5, 0.5, rng.uniform(0.32, 0.45), rng.uniform(0.32, 0.45), rng.uniform(0.0, std::numbers::pi)};
  const double body_level = rng.uniform(0.3, 0.5);
  std::vector<std::pair<Ellipse, double>> inner;
  const auto count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  for (int k = 0; k < count; ++k) inner.emplace_back(random_ellipse(rng, 0.06, 0.2), rng.uniform(-0.3, 0.5));

  for (Index h = 0; h < n; ++h) {
    for (Index w = 0; w < n; ++w) {
      const double x = pixel_centre(w, n), y = pixel_centre(h, n);
      auto soft = [&](const Ellipse& e) { return 1.0 / (1.0 + std::exp((radius(e, x, y) - 1.0) / spec.edge_softness)); };
      double v = body_level * soft(body);
      for (const auto& [e, level] : inner) v += level * soft(e);
      img.at(0, 0, h, w) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

Dataset gen_restoration_shard(const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client, Index count,
                              Split split) {
  spec.validate();
  const Index n = spec.size;
  Dataset d{Tensord({count, 1, n, n}), Tensord({count, 1, n, n}), {}};
  const NoiseConfig noise{spec.dose(client), spec.sigma_e2, false};
  for (Index i = 0; i < count; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const Tensord clean = phantom(spec, seed, split, client, idx);
    RngStream rng(seed, Purpose::Noise, {static_cast<std::uint64_t>(split), client, idx});
    const Tensord p_hat(clean.shape(), spec.attenuation_scale * clean.values());
    Tensord p = simulate_low_dose(p_hat, noise, rng, &d.noise);
    p.values() = p_hat.values() + spec.noise_gain * (p.values() - p_hat.values());
    p.values() = (p.values() / spec.attenuation_scale).cwiseMax(0.0).cwiseMin(1.0);
    put_sample(d.inputs, i, p);
    put_sample(d.targets, i, clean);
  }
  return d;
}

Dataset gen_segmentation_shard(const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client, Index count,
                               Split split) {
  spec.validate();
  const Index n = spec.size;
  Dataset d{Tensord({count, 1, n, n}), Tensord({count, 1, n, n}), {}};
  const double contrast = spec.client_contrast(client), bias = spec.client_bias(client);
  for (Index i = 0; i < count; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    RngStream rng(seed, purpose_of(split), {client, idx, 1});
    const auto shapes = rng.uniform_int(spec.min_shapes, spec.max_shapes);
    std::vector<std::pair<Ellipse, int>> parts;
    for (int k = 0; k < shapes; ++k) {
      parts.emplace_back(random_ellipse(rng, 0.08, 0.25), static_cast<int>(rng.uniform_int(1, spec.classes - 1)));
    }
    RngStream noise(seed, Purpose::Noise, {static_cast<std::uint64_t>(split), client, idx, 1});
    for (Index h = 0; h < n; ++h) {
      for (Index w = 0; w < n; ++w) {
        int label = 0;
        for (const auto& [e, cls] : parts) {
          if (radius(e, pixel_centre(w, n), pixel_centre(h, n)) < 1.0) label = cls;
        }
        const double level = static_cast<double>(label) / static_cast<double>(spec.classes - 1);
        d.targets.at(i, 0, h, w) = label;
        d.inputs.at(i, 0, h, w) = contrast * level + bias + noise.normal(0.0, spec.seg_noise);
      }
    }
  }
  return d;
}

Dataset gen_shard(Task task, const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client, Index count,
                  Split split) {
  return task == Task::Restoration ? gen_restoration_shard(spec, seed, client, count, split)
                                   : gen_segmentation_shard(spec, seed, client, count, split);
}

Tensord gather(const Tensord& t, std::span<const Index> idx) {
  Shape shape = t.shape();
  const Index row = t.size() / shape[0];
  shape[0] = static_cast<Index>(idx.size());
  Tensord out(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= t.dim(0)) throw ConfigError("gather: row " + std::to_string(idx[r]) + " out of range");
    out.values().segment(static_cast<Index>(r) * row, row) = t.values().segment(idx[r] * row, row);
  }
  return out;
}

void export_shard(const std::filesystem::path& dir, const std::string& name, const Dataset& data, Task task,
                  const PhantomSpec& spec, std::uint64_t seed, std::uint64_t client) {
  const std::vector<TensorRecord> recs{to_record("inputs", data.inputs, DType::F64),
                                       to_record("targets", data.targets, DType::F64)};
  save_checkpoint(dir / (name + ".ckpt"), recs);
  nlohmann::json manifest = {
      {"count", data.size()},
      {"seed", seed},
      {"client", client},
      {"task", task == Task::Restoration ? "restoration" : "segmentation"},
      {"noise_draws", data.noise.draws},
      {"noise_clamped", data.noise.clamped},
      {"spec",
       {{"image_size", spec.size},
        {"min_shapes", spec.min_shapes},
        {"max_shapes", spec.max_shapes},
        {"edge_softness", spec.edge_softness},
        {"attenuation_scale", spec.attenuation_scale},
        {"noise_gain", spec.noise_gain},
        {"sigma_e2", spec.sigma_e2},
        {"doses", spec.doses},
        {"classes", spec.classes},
        {"contrast", spec.contrast},
        {"bias", spec.bias},
        {"seg_noise", spec.seg_noise}}},
  };
  std::ofstream(dir / (name + ".json")) << manifest.dump(2) << "\n";
}

Dataset import_shard(const std::filesystem::path& dir, const std::string& name) {
  const auto recs = load_checkpoint(dir / (name + ".ckpt"));
  std::ifstream in(dir / (name + ".json"));
  if (!in) throw ConfigError("missing shard manifest " + (dir / (name + ".json")).string());
  const auto manifest = nlohmann::json::parse(in);
  Dataset d;
  for (const auto& r : recs) {
    if (r.name == "inputs") d.inputs = from_record<double>(r);
    if (r.name == "targets") d.targets = from_record<double>(r);
  }
  if (d.inputs.empty() || d.targets.empty() || d.inputs.shape() != d.targets.shape()) {
    throw CorruptionError("shard " + name + " lacks matching inputs/targets records");
  }
  if (manifest.at("count").get<Index>() != d.size()) throw CorruptionError("shard " + name + ": manifest count differs");
  d.noise.draws = manifest.value("noise_draws", std::uint64_t{0});
  d.noise.clamped = manifest.value("noise_clamped", std::uint64_t{0});
  return d;
}

}  // namespace rosfl
