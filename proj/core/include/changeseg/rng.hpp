#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace changeseg {

// splitmix64; used only to expand a 64-bit seed into xoshiro state.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// xoshiro256++ seeded from splitmix64. Every stochastic step in the toolkit
// draws from this generator so fixtures are reproducible across
// implementations.
//
// Derived distributions are defined exactly so other implementations can
// match them bit for bit:
//   uniform()      = (next() >> 11) * 2^-53                in [0, 1)
//   uniform_int(n) = next() % n  (rejection sampling removes modulo bias)
//   normal()       = Box-Muller, u1 = 1 - uniform(), u2 = uniform(),
//                    returns sqrt(-2 ln u1) * cos(2 pi u2); the sine branch is
//                    not cached.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed);
  // Independent stream for (seed, stream) pairs, e.g. one per epoch.
  Rng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next();
  std::uint64_t operator()() { return next(); }
  static constexpr std::uint64_t min() { return 0; }
  static constexpr std::uint64_t max() { return ~std::uint64_t{0}; }

  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  // Standard normal truncated to [-limit, limit] by rejection.
  double truncated_normal(double limit);

  // Fisher-Yates with uniform_int; defined order so results are portable.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  const std::array<std::uint64_t, 4>& state() const { return s_; }

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace changeseg
