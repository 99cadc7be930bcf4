#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace plr {

// Counter-based splittable RNG. A stream is fully described by (seed, counter),
// so any draw sequence can be replayed or handed to a parallel worker without
// shared mutable state. Integer path is exactly portable across platforms.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * ++counter_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float next_float() { return static_cast<float>(next_double()); }

  // uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  double next_normal() {
    // Box-Muller; consumes two draws.
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // normal truncated to two standard deviations
  double next_trunc_normal(double std_dev) {
    double z = next_normal();
    while (std::abs(z) > 2.0) z = next_normal();
    return z * std_dev;
  }

  // Independent child stream derived from a label; parent state is untouched.
  RngStream child(std::string_view tag) const {
    std::uint64_t h = seed_ ^ 0x6a09e667f3bcc909ULL;
    for (char c : tag) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ULL;
    }
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    return RngStream(h);
  }

  RngStream child(std::string_view tag, std::uint64_t index) const {
    RngStream c = child(tag);
    c.seed_ ^= 0x9e3779b97f4a7c15ULL * (index + 1);
    c.seed_ = (c.seed_ ^ (c.seed_ >> 30)) * 0xbf58476d1ce4e5b9ULL;
    return c;
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace plr
