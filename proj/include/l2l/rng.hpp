#pragma once

#include <cstdint>
#include <random>

namespace l2l {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded generator with counter-based splitting: a master seed fans out to
// independent named streams, so adding parallelism never reorders draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

  // Derive an independent stream; (seed, stream, counter) fully determine it.
  static Rng split(uint64_t seed, uint64_t stream, uint64_t counter = 0) {
    return Rng(splitmix64(splitmix64(seed ^ 0x5851f42d4c957f2dULL) + stream) ^
               splitmix64(counter + 0x14057b7ef767814fULL));
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  uint64_t next() { return eng_(); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace l2l
