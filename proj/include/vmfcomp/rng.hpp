#pragma once

#include <cstdint>
#include <random>

namespace vmfcomp {

// splitmix64: cheap, well-mixed 64-bit hash used to derive independent seed
// streams. Sample i of a run never shares a stream with sample j.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
  return splitmix64(seed ^ (0x9e3779b97f4a7c15ULL + v + (seed << 6) + (seed >> 2)));
}

// Derive a sub-seed from a master seed and up to three stream tags.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = splitmix64(seed);
  h = hash_combine(h, a);
  h = hash_combine(h, b);
  h = hash_combine(h, c);
  return h;
}

inline std::mt19937_64 make_engine(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace vmfcomp
