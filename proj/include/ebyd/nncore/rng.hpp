#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

namespace ebyd {

// Counter-based generator: the n-th draw of a stream is a pure function of
// (seed, stream name, n). Independent consumers derive their own named
// stream instead of sharing one mutable engine.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view stream);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 24 bits of resolution.
  float uniform();
  float uniform(float lo, float hi);
  // Standard normal via Box-Muller; consumes two draws per call.
  float normal();
  // Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t fnv1a64(std::string_view text);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace ebyd
