#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace prism {

// Stable 64-bit FNV-1a. Used wherever a hash must be identical across
// platforms and runs (feature hashing, noise seeds, manifest digests).
constexpr std::uint64_t fnv1a64(std::string_view data,
                                std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::string_view part) noexcept {
  // Length prefix keeps ("ab","c") and ("a","bc") apart.
  std::uint64_t len = part.size();
  std::uint64_t h = seed;
  for (int i = 0; i < 8; ++i) {
    h ^= (len >> (8 * i)) & 0xffU;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(fnv1a64(part, h));
}

std::string hex64(std::uint64_t v);

}  // namespace prism
