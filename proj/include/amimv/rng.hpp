#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace amimv {

/// Seeded random stream with keyed substreams.
///
/// substream({epoch, batch, item, transform}) depends only on the root seed
/// and the key, never on how many draws were taken elsewhere, so work can be
/// evaluated in any order and still reproduce bit for bit.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  RngStream substream(std::initializer_list<std::uint64_t> key) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Fisher-Yates shuffle driven by an RngStream.
template <class Range>
void shuffle(Range& range, RngStream& rng) {
  const auto n = static_cast<std::uint64_t>(range.size());
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(range[i - 1], range[j]);
  }
}

}  // namespace amimv
