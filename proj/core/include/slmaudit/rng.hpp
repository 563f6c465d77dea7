#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace slmaudit {

// 64-bit FNV-1a. Stable across platforms; used for seeding and config hashes.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t operator()() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// xoshiro256** seeded through SplitMix64.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed);

  std::uint64_t operator()();

 private:
  std::array<std::uint64_t, 4> s_;
};

// Mixes a user seed with a context label into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view context);

// Unbiased integer in [0, bound). Rejection sampling, so the sequence of draws
// is a pure function of the generator state (no implementation-defined
// distribution objects). bound must be > 0.
template <typename Generator>
std::uint64_t uniform_index(Generator& gen, std::uint64_t bound) {
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = gen();
    if (r >= threshold) return r % bound;
  }
}

// Uniform double in [0, 1) from the top 53 bits.
template <typename Generator>
double uniform_unit(Generator& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

}  // namespace slmaudit
