#include "amimv/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace amimv {

RngStream::RngStream(std::uint64_t seed) : seed_(seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  engine_.seed(seq);
}

RngStream RngStream::substream(std::initializer_list<std::uint64_t> key) const {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed_),
                                   static_cast<std::uint32_t>(seed_ >> 32),
                                   static_cast<std::uint32_t>(key.size())};
  for (auto k : key) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  // the child carries a derived seed so nested substreams stay distinct
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t derived[2];
  seq.generate(derived, derived + 2);
  return RngStream((static_cast<std::uint64_t>(derived[1]) << 32) | derived[0]);
}

double RngStream::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // rejection keeps the draw unbiased
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

}  // namespace amimv
