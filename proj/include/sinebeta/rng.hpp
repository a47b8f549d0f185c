#pragma once

// Counter-based random streams.
//
// Each stream is Philox4x32-10 keyed by a hash of the master seed, with the
// path index placed in the upper half of the 128-bit counter.  Streams for
// distinct path indices therefore never overlap, and a stream's output does
// not depend on how paths are scheduled across threads.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <utility>

namespace sinebeta::mc {

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter generate(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kW0;
        key[1] += kW1;
      }
      const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;
};

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Deterministic random stream for one Monte Carlo path.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::uint64_t path_index)
      : master_seed_(master_seed), path_index_(path_index) {
    const std::uint64_t k = splitmix64(master_seed ^ splitmix64(path_index + 0x632BE59BD9B4E019ull));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
  }

  std::uint64_t master_seed() const { return master_seed_; }
  std::uint64_t path_index() const { return path_index_; }
  std::uint64_t blocks_consumed() const { return block_; }

  std::uint32_t next_u32() {
    if (pos_ == 4) refill();
    return buffer_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform on the open interval (0, 1) with 53 random bits.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform on (-1, 1).
  double uniform_signed() { return 2.0 * uniform() - 1.0; }

  /// Pair of independent standard normals (Marsaglia polar method).
  std::pair<double, double> normal_pair() {
    for (;;) {
      const double u = uniform_signed();
      const double v = uniform_signed();
      const double s = u * u + v * v;
      if (s >= 1.0 || s == 0.0) continue;
      const double factor = std::sqrt(-2.0 * std::log(s) / s);
      return {u * factor, v * factor};
    }
  }

  /// Standard normal.  The second value of each polar pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const auto [a, b] = normal_pair();
    spare_ = b;
    has_spare_ = true;
    return a;
  }

  /// Complex Gaussian whose real and imaginary parts each have the given variance.
  std::complex<double> complex_normal(double variance) {
    const auto [a, b] = normal_pair();
    const double sd = std::sqrt(variance);
    return {a * sd, b * sd};
  }

 private:
  void refill() {
    const Philox4x32::Counter ctr = {static_cast<std::uint32_t>(block_),
                                     static_cast<std::uint32_t>(block_ >> 32),
                                     static_cast<std::uint32_t>(path_index_),
                                     static_cast<std::uint32_t>(path_index_ >> 32)};
    buffer_ = Philox4x32::generate(ctr, key_);
    ++block_;
    pos_ = 0;
  }

  std::uint64_t master_seed_;
  std::uint64_t path_index_;
  Philox4x32::Key key_{};
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int pos_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sinebeta::mc
