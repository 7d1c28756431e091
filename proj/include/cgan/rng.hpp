#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace cgan {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Child seed for a named component, so every random stream in a run is a
/// pure function of one top-level seed.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) {
  return splitmix64(parent ^ splitmix64(fnv1a(label)));
}

/// Counter-based uniform in [0, 1) keyed by an arbitrary tuple of integers.
inline double counter_uniform(std::initializer_list<std::uint64_t> key) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t k : key) h = splitmix64(h ^ k);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace cgan
