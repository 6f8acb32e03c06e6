#ifndef ELVS_RNG_HPP
#define ELVS_RNG_HPP

#include <cstdint>
#include <random>

#include "elvs/normal.hpp"

namespace elvs {

// Seed derivation uses the splitmix64 output function (Steele, Lea & Flood
// 2014). Substream k of a master seed is mix64(master + (k+1)*gamma), which
// is exactly the (k+1)-th splitmix64 output for that master state, so
// parallel replicates can derive their streams independently of order.
inline constexpr std::uint64_t kSplitmix64Gamma = 0x9E3779B97F4A7C15ull;

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(master + (index + 1) * kSplitmix64Gamma);
}

/// Seeded pseudo-random source for data generation. The engine is
/// std::mt19937_64; uniforms take the top 53 bits so every value lies
/// strictly inside (0,1), and normals are produced by the inverse-CDF
/// transform (AS 241), which keeps generated data identical across
/// standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() { return normal_quantile(uniform()); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace elvs

#endif  // ELVS_RNG_HPP
