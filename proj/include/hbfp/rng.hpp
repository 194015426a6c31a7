#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hbfp {

// All randomness flows from one root seed; components draw from named
// substreams so data, init and sampler can be varied independently.
inline std::uint64_t hash_stream(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  // FNV-1a over the name, then splitmix64 finalization.
  std::uint64_t h = 14695981039346656037ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (h ^ (a + 0x632be59bd9b4e019ull * (b + 1)));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  return std::mt19937_64(hash_stream(seed, name, a, b));
}

}  // namespace hbfp
