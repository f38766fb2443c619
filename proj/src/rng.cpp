#include "rosfl/rng.hpp"

#include <vector>

namespace rosfl {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed, Purpose purpose, std::initializer_list<std::uint64_t> ids) {
  std::vector<std::uint32_t> words;
  auto push64 = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push64(seed);
  words.push_back(static_cast<std::uint32_t>(purpose));
  words.push_back(static_cast<std::uint32_t>(ids.size()));
  for (auto id : ids) push64(id);
  std::seed_seq seq(words.begin(), words.end());
  engine_.seed(seq);
}

}  // namespace rosfl
