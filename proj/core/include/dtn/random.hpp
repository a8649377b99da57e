#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>

namespace dtn {

/// Seeded random stream over std::mt19937_64.
///
/// The engine's output sequence is fixed by the standard; the distributions
/// here are written out so that draws are identical across standard
/// libraries. Streams keyed by several integers (seed, phase, iteration, ...)
/// let training resume at any iteration without replaying earlier draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  Rng(std::initializer_list<std::uint64_t> key);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be positive.
  std::size_t uniform_index(std::size_t n);
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  /// Normal(0, stddev) resampled until within two standard deviations.
  double truncated_normal(double stddev);

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = uniform_index(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dtn
