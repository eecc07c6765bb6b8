#pragma once

#include <cstdint>

namespace csl {

// Counter-based generator: draw n of a stream is a pure function of
// (seed, n), so a stored (seed, counter) pair replays exactly.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t counter_draw(std::uint64_t seed, std::uint64_t counter) noexcept {
  return splitmix64(splitmix64(seed) ^ (counter * 0xd1b54a32d192ed03ULL + 0x8bb84b93962eacc9ULL));
}

// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit_interval(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return counter_draw(master ^ 0x5851f42d4c957f2dULL, index);
}

}  // namespace csl
