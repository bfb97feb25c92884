#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace arig {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based generator: the value of draw n depends only on
// (seed, stream, n), never on what other streams have consumed. Normal
// variates use Box-Muller on two consecutive uniforms so results are the same
// on every standard library.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(splitmix64(seed ^ splitmix64(stream ^ 0x5851f42d4c957f2dULL))) {}

  std::uint64_t bits(std::uint64_t index) const { return splitmix64(key_ + splitmix64(index)); }

  std::uint64_t next_bits() { return bits(counter_++); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_bits() >> 11) * 0x1.0p-53; }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void fill_normal(std::span<T> out) {
    for (T& v : out) v = static_cast<T>(normal());
  }

  std::uint64_t position() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace arig
