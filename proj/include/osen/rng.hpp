#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace osen {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_label(std::string_view label) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based seed splitting: every subsystem draws from
/// `derive_seed(root, "name", index)` so adding a consumer never perturbs
/// another one's stream.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                    std::uint64_t counter = 0) noexcept {
  return mix64(mix64(root ^ hash_label(label)) + counter);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view label, std::uint64_t counter = 0) {
  return Rng(derive_seed(root, label, counter));
}

}  // namespace osen
