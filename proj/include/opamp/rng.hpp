#pragma once

// Deterministic random number generation.
//
// Seeds are 64-bit integers. Independent streams are derived with
// derive_seed(parent, index), a SplitMix64-based mix, so a Monte-Carlo trial
// i of an experiment with master seed m always uses the stream
// derive_seed(m, i) no matter which worker runs it. Uniform draws come from
// xoshiro256** and Gaussian draws from the basic Box-Muller transform, both
// written out here so results do not depend on the standard library vendor.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace opamp {

using Seed = std::uint64_t;

/// One SplitMix64 output step applied to `x`.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Stable child seed H(parent, index) = splitmix64(parent ^ splitmix64(index)).
constexpr Seed derive_seed(Seed parent, std::uint64_t index) noexcept {
  return splitmix64(parent ^ splitmix64(index));
}

/// xoshiro256** with SplitMix64 state expansion.
class Rng {
public:
  explicit Rng(Seed seed) noexcept {
    std::uint64_t x = seed;
    for (auto &word : state_) {
      word = splitmix64(x);
      x += 0x9E3779B97F4A7C15ULL;
    }
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double gaussian() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace opamp
