#pragma once

// Deterministic seeded randomness. Every random draw in the project flows
// from a single config seed through named substreams, so components can be
// re-seeded independently and checkpoint resume reproduces draws exactly
// (streams are keyed by iteration, never by mutable global state).

#include <cmath>
#include <cstdint>
#include <string_view>

namespace segada {

inline constexpr std::uint64_t kSplitmixGamma = 0x9E3779B97F4A7C15ull;

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += kSplitmixGamma;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_u64(std::uint64_t seed, std::uint64_t v) {
  std::uint64_t s = seed ^ (v + kSplitmixGamma + (seed << 6) + (seed >> 2));
  return splitmix64_next(s);
}

inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Sequential pseudo-random stream. Not cryptographic; integer draws are
// bit-stable across platforms (gaussian goes through libm, stable per binary).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // [0, n), n > 0; multiply-high mapping (bias < 2^-53 for our n)
  int uniform_int(int n) {
    return int((static_cast<unsigned __int128>(next_u64()) *
                static_cast<std::uint64_t>(n)) >> 64);
  }

  // [lo, hi] inclusive
  int uniform_int(int lo, int hi) { return lo + uniform_int(hi - lo + 1); }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline std::uint64_t substream(std::uint64_t seed, std::string_view name) {
  return hash_u64(seed, hash_str(name));
}
inline std::uint64_t substream(std::uint64_t seed, std::string_view name,
                               std::uint64_t a) {
  return hash_u64(substream(seed, name), a);
}
inline std::uint64_t substream(std::uint64_t seed, std::string_view name,
                               std::uint64_t a, std::uint64_t b) {
  return hash_u64(substream(seed, name, a), b);
}

}  // namespace segada
