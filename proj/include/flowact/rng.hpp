#pragma once

#include <cmath>
#include <cstdint>

namespace flowact {

// Self-contained xoshiro256++ generator. Every stochastic component in the
// project draws from this class so that runs are reproducible byte-for-byte
// across builds and platforms (std:: distributions are implementation
// defined, so they are not used anywhere).
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // SplitMix64 expansion of the seed into the 256-bit state.
    uint64_t x = seed;
    for (auto& word : state_) {
      x += 0x9e3779b97f4a7c15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      word = z ^ (z >> 31);
    }
    has_spare_normal_ = false;
    spare_normal_ = 0.0;
  }

  // Independent stream derived from (seed, salt); used to make batch k a pure
  // function of (run seed, k) regardless of who samples it.
  static Rng derived(uint64_t seed, uint64_t salt) {
    uint64_t mixed = seed ^ (0x9e3779b97f4a7c15ull + (salt << 6) + (salt >> 2));
    mixed ^= salt * 0xd1342543de82ef95ull;
    return Rng(mixed);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Integer in [0, n).
  int64_t below(int64_t n) {
    return n <= 1 ? 0 : static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  bool coin(double p = 0.5) { return uniform01() < p; }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_normal_) {
      has_spare_normal_ = false;
      return spare_normal_;
    }
    double u = 1.0 - uniform01();  // (0, 1]
    double v = uniform01();
    double r = std::sqrt(-2.0 * std::log(u));
    double theta = 6.283185307179586 * v;
    spare_normal_ = r * std::sin(theta);
    has_spare_normal_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Beta(alpha, 1) by inverse CDF: F(x) = x^alpha.
  double beta_a1(double alpha) { return std::pow(uniform01(), 1.0 / alpha); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4] = {};
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace flowact
