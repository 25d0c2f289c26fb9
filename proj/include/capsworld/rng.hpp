#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace capsworld {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// xoroshiro128++ generator. The distributions below are implemented here
/// rather than taken from <random> so that streams are bit-identical across
/// standard library implementations.
class Rng {
 public:
  using State = std::array<std::uint64_t, 2>;

  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t sm = seed;
    s_[0] = splitmix64(sm);
    s_[1] = splitmix64(sm);
  }

  /// Independent stream for item `index` of a parent seed (episode, lane...).
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t sm = seed ^ index;
    std::uint64_t mixed = splitmix64(sm);
    return Rng(mixed);
  }

  std::uint64_t next() {
    const std::uint64_t s0 = s_[0];
    std::uint64_t s1 = s_[1];
    const std::uint64_t result = rotl(s0 + s1, 17) + s0;
    s1 ^= s0;
    s_[0] = rotl(s0, 49) ^ s1 ^ (s1 << 21);
    s_[1] = rotl(s1, 28);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  State state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  State s_{};
};

}  // namespace capsworld
