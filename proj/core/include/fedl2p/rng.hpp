#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedl2p {

using Rng = std::mt19937_64;

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent seed from a root seed, a named stream and up to two
// indices (e.g. round, client). Every source of randomness in the project
// goes through this so a run is fully determined by its root seed.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                    std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(root ^ fnv1a(stream));
  h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ull + 1));
  h = splitmix64(h ^ (b * 0xff51afd7ed558ccdull + 1));
  return h;
}

inline Rng make_rng(std::uint64_t root, std::string_view stream,
                    std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(root, stream, a, b));
}

}  // namespace fedl2p
