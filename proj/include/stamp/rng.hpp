#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace stamp {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ hash_name(stream)) + index);
}

/// Independent named generators so that, e.g., changing how many masks are
/// drawn never shifts the data order.
struct RngStreams {
  std::mt19937_64 data;
  std::mt19937_64 mask;
  std::mt19937_64 latent;
  std::mt19937_64 init;

  explicit RngStreams(std::uint64_t seed = 0)
      : data(derive_seed(seed, "data")),
        mask(derive_seed(seed, "mask")),
        latent(derive_seed(seed, "latent")),
        init(derive_seed(seed, "init")) {}

  std::string serialize() const;
  static RngStreams deserialize(const std::string& text);
};

}  // namespace stamp
