#include "ebyd/nncore/rng.hpp"

#include <cmath>
#include <numbers>

#include "ebyd/errors.hpp"

namespace ebyd {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix64(std::uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

CounterRng::CounterRng(std::uint64_t seed, std::string_view stream)
    : key_(splitmix64(splitmix64(seed) ^ fnv1a64(stream))) {}

std::uint64_t CounterRng::next_u64() {
  return splitmix64(key_ + kGolden * ++counter_);
}

float CounterRng::uniform() {
  return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

float CounterRng::uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

float CounterRng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                            std::cos(2.0 * std::numbers::pi * u2));
}

std::size_t CounterRng::below(std::size_t n) {
  if (n == 0) throw ArgumentError("CounterRng::below: n must be positive");
  const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::size_t>(wide >> 64);
}

}  // namespace ebyd
