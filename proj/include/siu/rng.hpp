#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace siu {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random stream. All randomness in the project goes through
// this class; uniform and gaussian draws are hand-rolled on top of
// mt19937_64 so sequences are identical across standard libraries.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  // Substream for (seed, path...). Unrelated components draw from
  // independent streams so insertion-order changes cannot ripple.
  static RngStream derive(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = seed;
    splitmix64(s);
    for (std::uint64_t p : path) {
      s ^= p + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
      splitmix64(s);
    }
    return RngStream(splitmix64(s));
  }

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Index drawn from an explicit (normalized) probability vector.
  int categorical(std::span<const double> probs) {
    const double u = uniform();
    double cum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace siu
