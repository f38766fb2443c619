#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace rosfl {

enum class Purpose : std::uint32_t {
  Init = 1,
  Shuffle = 2,
  TrainData = 3,
  TestData = 4,
  Noise = 5,
  Test = 6,
};

std::uint64_t fnv1a(std::string_view text);

/// Reproducible random stream addressed by (seed, purpose, ids...).
///
/// Two streams built from the same address produce identical sequences, so
/// every party can regenerate its own data, shuffles and initial weights
/// without coordination.
class RngStream {
 public:
  RngStream(std::uint64_t seed, Purpose purpose, std::initializer_list<std::uint64_t> ids = {});

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Returns a double because the mean can exceed the int range at high dose.
  double poisson(double mean) {
    return static_cast<double>(std::poisson_distribution<std::int64_t>(mean)(engine_));
  }
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rosfl
