#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace optlens {

// All randomness in the project flows through this header. Distributions are
// hand-rolled on top of splitmix64 because libstdc++'s distribution objects
// are not bit-portable across standard library versions; these are.

inline uint64_t splitmix64_next(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Derives the seed for a named stream from the master seed. Streams are keyed
// by (name, index) so e.g. the batch shuffle of epoch 7 and the init of seed
// run 3 never collide; changing one stream's consumption cannot shift another.
inline uint64_t stream_seed(uint64_t master, std::string_view name, uint64_t index = 0) {
  uint64_t s = master ^ fnv1a64(name);
  uint64_t a = splitmix64_next(s);
  uint64_t t = a + index * 0x9e3779b97f4a7c15ull;
  return splitmix64_next(t);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  // uniform in [0, 1), 53 random mantissa bits
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the sine branch is discarded to keep the stream stateless.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Exp(1)
  double exponential() { return -std::log(1.0 - uniform()); }

  // unbiased integer in [0, n)
  uint64_t index(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace optlens
