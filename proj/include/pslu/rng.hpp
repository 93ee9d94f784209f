#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace pslu {

/// Deterministic splitmix64 generator. All randomness in the toolkit flows
/// through this class so that runs are reproducible across platforms; the
/// standard-library distributions are implementation-defined and never used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be > 0.
  std::size_t uniform_below(std::size_t n) {
    // Rejection sampling keeps the distribution exactly uniform.
    const std::uint64_t bound = ~0ULL - (~0ULL % n);
    std::uint64_t x = next_u64();
    while (x >= bound) x = next_u64();
    return static_cast<std::size_t>(x % n);
  }

  /// Standard normal via Box-Muller; caches the spare value.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // 1 - u1 avoids log(0).
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double theta = 6.283185307179586 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Named substream: a generator derived from (seed, name, index).
  /// Streams with different names or indices are statistically independent.
  static Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the name
    for (char c : name) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 0x100000001b3ULL;
    }
    Rng mixer(seed ^ h);
    mixer.state_ ^= 0x9e3779b97f4a7c15ULL * (index + 1);
    return Rng(mixer.next_u64());
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace pslu
