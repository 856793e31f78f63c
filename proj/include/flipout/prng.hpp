#pragma once

// Counter-based, splittable random numbers.
//
// A key is the pair (root seed, path). Its 64-bit stream id is a hash chain
// over the path and is used as the Philox4x32-10 key; draws are addressed by
// a 64-bit counter plus a domain tag, so element k of any sampled matrix is
// a pure function of (key, domain, k). Nothing is mutated and keys can be
// copied freely between threads.
//
// Gaussian draws use Box-Muller: block b yields two uniforms u1, u2 in (0,1)
// and the pair (sqrt(-2 ln u1) cos 2pi u2, sqrt(-2 ln u1) sin 2pi u2) fills
// elements 2b and 2b+1 in row-major order. Golden files depend on this.

#include "flipout/core.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace flipout {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint32_t mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t* hi) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  *hi = static_cast<std::uint32_t>(p >> 32);
  return static_cast<std::uint32_t>(p);
}

}  // namespace detail

using PhiloxBlock = std::array<std::uint32_t, 4>;

/// Philox4x32 with 10 rounds (Salmon et al.), the Random123 reference variant.
inline PhiloxBlock philox4x32(PhiloxBlock ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, hi1;
    const std::uint32_t lo0 = detail::mulhilo32(kM0, ctr[0], &hi0);
    const std::uint32_t lo1 = detail::mulhilo32(kM1, ctr[2], &hi1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// Distinguishes the sample families drawn from one key so that, e.g.,
/// Gaussian and sign draws from the same key are not aliased.
enum class Domain : std::uint32_t { gaussian = 1, sign = 2, uniform = 3 };

class RngKey {
 public:
  explicit RngKey(std::uint64_t root_seed = 42)
      : root_seed_(root_seed), stream_(detail::mix64(root_seed + 0x9E3779B97F4A7C15ULL)) {}

  RngKey split(std::uint64_t index) const {
    RngKey child = *this;
    child.path_.push_back(index);
    child.stream_ = detail::mix64(stream_ ^ (detail::mix64(index + 0x632BE59BD9B4E019ULL) +
                                             0xD1B54A32D192ED03ULL));
    return child;
  }

  std::uint64_t root_seed() const { return root_seed_; }
  std::span<const std::uint64_t> path() const { return path_; }
  std::uint64_t stream_id() const { return stream_; }

  /// Raw 128-bit block number `counter` in the given domain.
  PhiloxBlock block(Domain domain, std::uint64_t counter) const {
    const PhiloxBlock ctr = {static_cast<std::uint32_t>(counter),
                             static_cast<std::uint32_t>(counter >> 32),
                             static_cast<std::uint32_t>(domain), 0u};
    return philox4x32(ctr, {static_cast<std::uint32_t>(stream_),
                            static_cast<std::uint32_t>(stream_ >> 32)});
  }

  friend bool operator==(const RngKey& a, const RngKey& b) {
    return a.root_seed_ == b.root_seed_ && a.path_ == b.path_;
  }

 private:
  std::uint64_t root_seed_;
  std::vector<std::uint64_t> path_;
  std::uint64_t stream_;
};

inline RngKey split(const RngKey& key, std::uint64_t index) { return key.split(index); }

namespace detail {

inline double open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1p-53;
}

inline std::uint64_t join(std::uint32_t lo, std::uint32_t hi) {
  return static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
}

inline std::pair<double, double> box_muller(const PhiloxBlock& b) {
  const double u1 = open_unit(join(b[0], b[1]));
  const double u2 = open_unit(join(b[2], b[3]));
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

}  // namespace detail

/// Matrix of i.i.d. N(0, 1) entries; deterministic in `key`.
inline Matrix sample_gaussian(const RngKey& key, Index rows, Index cols) {
  require_shape(rows >= 0 && cols >= 0, "sample_gaussian: negative shape");
  Matrix out(rows, cols);
  Real* data = out.data();
  const Index n = out.size();
  for (Index e = 0; e < n; e += 2) {
    const auto [z0, z1] = detail::box_muller(key.block(Domain::gaussian, static_cast<std::uint64_t>(e / 2)));
    data[e] = static_cast<Real>(z0);
    if (e + 1 < n) data[e + 1] = static_cast<Real>(z1);
  }
  return out;
}

/// Matrix of independent uniform signs in {-1, +1}; deterministic in `key`.
inline Matrix sample_signs(const RngKey& key, Index rows, Index cols) {
  require_shape(rows >= 0 && cols >= 0, "sample_signs: negative shape");
  Matrix out(rows, cols);
  Real* data = out.data();
  const Index n = out.size();
  for (Index base = 0; base < n; base += 128) {
    const PhiloxBlock b = key.block(Domain::sign, static_cast<std::uint64_t>(base / 128));
    const Index stop = std::min<Index>(128, n - base);
    for (Index k = 0; k < stop; ++k) {
      const bool bit = (b[static_cast<std::size_t>(k / 32)] >> (k % 32)) & 1u;
      data[base + k] = bit ? Real(1) : Real(-1);
    }
  }
  return out;
}

/// Sequential view over a key for scalar draws (mini-batch indices, data
/// generation). Each call consumes whole Philox blocks in the uniform domain.
class RngStream {
 public:
  explicit RngStream(RngKey key) : key_(std::move(key)) {}

  std::uint64_t next_u64() {
    if (buffered_ == 0) {
      const PhiloxBlock b = key_.block(Domain::uniform, counter_++);
      buffer_[0] = detail::join(b[0], b[1]);
      buffer_[1] = detail::join(b[2], b[3]);
      buffered_ = 2;
    }
    return buffer_[2 - buffered_--];
  }

  double uniform() { return detail::open_unit(next_u64()); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("RngStream::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

 private:
  RngKey key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 2> buffer_{};
  int buffered_ = 0;
};

}  // namespace flipout
