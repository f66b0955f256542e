#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "corl/hashing.hpp"

namespace corl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seeded generator with deterministic forking. Children are derived from
// (seed, salt) only, never from engine state, so forking in any order or
// from any thread yields the same streams. Distributions are implemented
// here rather than with std:: distribution objects because their output
// must stay bit-stable across standard library versions (frozen test
// values and bit-identical metrics depend on it).
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

  Rng fork(uint64_t salt) const {
    return Rng(splitmix64(seed_ ^ splitmix64(salt + 0x51ed2701a9e5e3d5ull)));
  }
  Rng fork(std::string_view name) const { return fork(fnv1a64(name)); }
  Rng fork(std::string_view name, uint64_t salt) const {
    return fork(fnv1a64(name) ^ splitmix64(salt));
  }

  uint64_t seed() const { return seed_; }

  uint64_t u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // rejection sampling to avoid modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // standard normal, Box-Muller with a cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

} // namespace corl
