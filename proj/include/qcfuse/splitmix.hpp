#pragma once

#include <cstdint>

namespace qcfuse {

inline constexpr uint64_t kSplitmixGamma = 0x9E3779B97F4A7C15ULL;

inline constexpr uint64_t splitmix64_mix(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Output of the splitmix64 stream keyed by `seed` at position `step`
// (step 0 is the first value produced after seeding).
inline constexpr uint64_t splitmix64_at(uint64_t seed, uint64_t step) {
  return splitmix64_mix(seed + (step + 1) * kSplitmixGamma);
}

// Top 53 bits scaled to [0, 1).
inline constexpr double to_unit_double(uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += kSplitmixGamma;
    return splitmix64_mix(state_);
  }

  double uniform() { return to_unit_double(next()); }

  // Uniform integer in [0, bound). Plain modulo; the bias is irrelevant at
  // the sizes used here and keeps the stream reproducible across languages.
  uint64_t below(uint64_t bound) { return next() % bound; }

 private:
  uint64_t state_;
};

}  // namespace qcfuse
