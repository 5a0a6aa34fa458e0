#pragma once

#include <cstdint>
#include <random>

namespace dynn {

// Seeded random source. The integer-to-real conversions are written out
// here rather than taken from <random> distributions so that streams are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // (lo, hi]
  double uniform_open_closed(double lo, double hi) {
    return lo + (hi - lo) * (1.0 - uniform01());
  }

  // [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform over {0, ..., n - 1}.
  std::size_t index(std::size_t n) {
    const unsigned __int128 wide = static_cast<unsigned __int128>(engine_()) * n;
    return static_cast<std::size_t>(wide >> 64);
  }

 private:
  std::mt19937_64 engine_;
};

// Seed for an independent sub-stream (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base ^ (salt + 0x9e3779b97f4a7c15ULL + (base << 6) + (base >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace dynn
