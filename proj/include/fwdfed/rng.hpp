#pragma once

// Counter-based random numbers.
//
// Every random quantity in the library is a pure function of a 64-bit key and
// a 128-bit counter, computed with Philox4x32-10 (Salmon et al., SC'11). The
// server and the clients can therefore regenerate a perturbation vector from
// its seed alone, with no generator state crossing the wire.
//
// Bit-exact conventions:
//   * key   = (lo32(seed), hi32(seed))
//   * a 53-bit uniform is built from two 32-bit words as
//       ((uint64(w_hi) << 21) ^ (w_lo >> 11)) * 2^-53
//   * standard normals come in Box-Muller pairs; pair j of a perturbation with
//     seed (base, index) uses counter (lo32(index), hi32(index), lo32(j), hi32(j))
//     and key base; coordinate 2j takes the cosine branch, 2j+1 the sine branch.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace fwdfed::rng {

using Counter = std::array<std::uint32_t, 4>;

inline Counter philox4x32_10(Counter ctr, std::uint64_t seed) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  std::uint32_t k0 = static_cast<std::uint32_t>(seed);
  std::uint32_t k1 = static_cast<std::uint32_t>(seed >> 32);
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
    k0 += kW0;
    k1 += kW1;
  }
  return ctr;
}

inline Counter make_counter(std::uint64_t a, std::uint64_t b) {
  return {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
          static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
}

// Uniform in [0, 1) with 53 random bits.
inline double to_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (std::uint64_t{hi} << 21) ^ (lo >> 11);
  return static_cast<double>(bits) * 0x1.0p-53;
}

// Two independent N(0,1) draws from one Philox block.
inline std::pair<double, double> normal_pair(const Counter& block) {
  const double u1 = 1.0 - to_unit(block[0], block[1]);  // (0, 1]
  const double u2 = to_unit(block[2], block[3]);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(t), r * std::sin(t)};
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Domain-separated sub-seed: distinct (tag, k) pairs give unrelated streams.
inline std::uint64_t derive(std::uint64_t parent, std::string_view tag, std::uint64_t k = 0) {
  return splitmix64(parent ^ splitmix64(fnv1a(tag) ^ splitmix64(k)));
}

// Sequential stream over a Philox key; the n-th block uses counter (n, 0).
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64() {
    if (cursor_ == 2) refill();
    return words_[cursor_++];
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const auto [z0, z1] = normal_pair(philox4x32_10(make_counter(block_++, 1), seed_));
    spare_ = z1;
    has_spare_ = true;
    return z0;
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Fisher-Yates; identical on every standard library, unlike std::shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  void refill() {
    const Counter c = philox4x32_10(make_counter(block_++, 0), seed_);
    words_[0] = (std::uint64_t{c[0]} << 32) | c[1];
    words_[1] = (std::uint64_t{c[2]} << 32) | c[3];
    cursor_ = 0;
  }

  std::uint64_t seed_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 2> words_{};
  int cursor_ = 2;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fwdfed::rng
