#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace utrack {

/// Counter-based random stream (Philox4x32-10).
///
/// Every stochastic consumer owns its own stream, keyed by a structural
/// identity (master seed, env index, purpose tag, ...). Streams never share
/// state, so results do not depend on scheduling or worker-thread count,
/// and a stream is restored exactly from its key plus a draw position.
class RngStream {
 public:
  struct State {
    std::uint64_t position = 0;
    bool have_spare = false;
    double spare = 0.0;
  };

  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t key, std::uint64_t stream_id)
      : key_lo_(static_cast<std::uint32_t>(key)),
        key_hi_(static_cast<std::uint32_t>(key >> 32)),
        stream_id_(stream_id) {}

  /// Stable 64-bit mix for deriving sub-stream keys from structural ids.
  static std::uint64_t derive_key(std::uint64_t a, std::uint64_t b = 0,
                                  std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (std::uint64_t v : {a, b, c, d}) {
      h ^= splitmix64(v + h);
      h = (h << 23) | (h >> 41);
    }
    return splitmix64(h);
  }

  std::uint32_t next_u32() {
    const int lane = static_cast<int>(pos_ & 3);
    if (lane == 0 || !buf_valid_) {
      block_at(pos_ >> 2, buf_);
      buf_valid_ = true;
    }
    ++pos_;
    return buf_[lane];
  }

  std::uint64_t next_u64() {
    std::uint64_t lo = next_u32();
    std::uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in (0, 1]; safe as a log() argument.
  double uniform_pos() { return 1.0 - uniform(); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n). n must be >= 1.
  std::uint32_t uniform_int(std::uint32_t n) {
    // Lemire-style rejection keeps the draw unbiased.
    std::uint64_t x = next_u32();
    std::uint64_t m = x * n;
    auto l = static_cast<std::uint32_t>(m);
    if (l < n) {
      const std::uint32_t floor = (-n) % n;
      while (l < floor) {
        x = next_u32();
        m = x * n;
        l = static_cast<std::uint32_t>(m);
      }
    }
    return static_cast<std::uint32_t>(m >> 32);
  }

  /// Geometric on {1, 2, ...} with mean `mean_value` (>= 1).
  std::uint64_t geometric(double mean_value) {
    const double p = 1.0 / mean_value;
    const double u = uniform_pos();
    const double k = std::ceil(std::log(u) / std::log1p(-p));
    return k < 1.0 ? 1 : static_cast<std::uint64_t>(k);
  }

  State state() const { return {pos_, have_spare_, spare_}; }
  void restore(const State& s) {
    pos_ = s.position;
    have_spare_ = s.have_spare;
    spare_ = s.spare;
    buf_valid_ = false;
  }
  std::uint64_t position() const { return pos_; }

  /// Raw Philox4x32-10 block for this stream at an explicit block index.
  void block_at(std::uint64_t block, std::uint32_t out[4]) const {
    std::uint32_t ctr[4] = {static_cast<std::uint32_t>(block),
                            static_cast<std::uint32_t>(block >> 32),
                            static_cast<std::uint32_t>(stream_id_),
                            static_cast<std::uint32_t>(stream_id_ >> 32)};
    std::uint32_t k0 = key_lo_, k1 = key_hi_;
    for (int round = 0; round < 10; ++round) {
      round_once(ctr, k0, k1);
      k0 += 0x9E3779B9u;  // golden ratio
      k1 += 0xBB67AE85u;  // sqrt(3)-1
    }
    out[0] = ctr[0];
    out[1] = ctr[1];
    out[2] = ctr[2];
    out[3] = ctr[3];
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                      std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
  }

  static void round_once(std::uint32_t ctr[4], std::uint32_t k0,
                         std::uint32_t k1) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(0xD2511F53u, ctr[0], hi0, lo0);
    mulhilo(0xCD9E8D57u, ctr[2], hi1, lo1);
    const std::uint32_t c1 = ctr[1], c3 = ctr[3];
    ctr[0] = hi1 ^ c1 ^ k0;
    ctr[1] = lo1;
    ctr[2] = hi0 ^ c3 ^ k1;
    ctr[3] = lo0;
  }

  std::uint32_t key_lo_ = 0;
  std::uint32_t key_hi_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t pos_ = 0;  // absolute u32 draw index
  std::uint32_t buf_[4] = {0, 0, 0, 0};
  bool buf_valid_ = false;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace utrack
