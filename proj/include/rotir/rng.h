#pragma once

#include <cstdint>

namespace rotir {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Counter-based generator: every draw is a pure hash of (seed, a, b, c, salt)
// plus a local counter, so streams are independent of evaluation order and
// thread scheduling. Keys are things like (pixel index, iteration, sample).
class DetRng {
 public:
  DetRng(uint64_t seed, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0, uint64_t salt = 0) {
    uint64_t s = detail::splitmix64(seed);
    s = detail::splitmix64(s ^ a);
    s = detail::splitmix64(s ^ b);
    s = detail::splitmix64(s ^ c);
    state_ = detail::splitmix64(s ^ salt);
  }

  uint64_t bits() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1): 53 mantissa bits, never returns 1.0.
  double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return bits() % n; }

 private:
  uint64_t state_;
};

}  // namespace rotir
