#pragma once

#include <cmath>
#include <cstdint>

namespace lrpanel {

/// Counter-based random number generation.
///
/// Every draw is a pure function of (seed, stream, counter), so any draw can
/// be reproduced in isolation and parallel workers never share mutable RNG
/// state. The mixer is the splitmix64 finalizer; normals come from Box-Muller.
namespace rng {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream key from a base seed and a stream tag.
inline std::uint64_t substream(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ mix64(tag * 0x632be59bd9b4e019ULL + 0x9e6c63d0876a9a47ULL));
}

}  // namespace rng

/// Stateless uniform/normal source over a keyed counter space.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream_tag)
      : key_(rng::substream(seed, stream_tag)) {}

  /// Uniform draw in (0, 1].
  double uniform(std::uint64_t counter) const {
    const std::uint64_t bits = rng::mix64(key_ ^ (counter * rng::kGolden));
    return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
  }

  /// One standard normal per counter (Box-Muller, cosine branch).
  double normal(std::uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  /// Two standard normals per counter; cheaper than two normal() calls.
  void normal_pair(std::uint64_t counter, double& a, double& b) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586477 * u2;
    a = radius * std::cos(angle);
    b = radius * std::sin(angle);
  }

  /// Standard logistic draw.
  double logistic(std::uint64_t counter) const {
    const double u = uniform(counter);
    return std::log(u / (1.0 - u + 1e-300));
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

}  // namespace lrpanel
