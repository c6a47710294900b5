#pragma once

// Counter-based random numbers (Philox4x32-10).
//
// A stream is identified by (seed, stream id); the n-th draw of a stream is a
// pure function of (seed, stream id, n). Work items such as Monte Carlo
// scenarios each own a stream, so serial and threaded runs produce identical
// numbers regardless of scheduling.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace bayesgrid {

using Philox4x32Block = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

namespace detail {

inline constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
inline constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
inline constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

constexpr void mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

constexpr Philox4x32Block philox_round(const Philox4x32Block& c, const Philox4x32Key& k) {
  std::uint32_t hi0 = 0, lo0 = 0, hi1 = 0, lo1 = 0;
  mulhilo32(kPhiloxM0, c[0], hi0, lo0);
  mulhilo32(kPhiloxM1, c[2], hi1, lo1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

}  // namespace detail

/// The Philox4x32 bijection with 10 rounds.
constexpr Philox4x32Block philox4x32_10(Philox4x32Block counter, Philox4x32Key key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += detail::kPhiloxW0;
      key[1] += detail::kPhiloxW1;
    }
    counter = detail::philox_round(counter, key);
  }
  return counter;
}

/// Purpose tags keep streams of different pipeline stages disjoint.
enum class StreamTag : std::uint16_t {
  kGeneric = 0,
  kFactorPath = 1,
  kMigration = 2,
  kCollateral = 3,
  kScenario = 4,
  kGridStart = 5,
  kGridTarget = 6,
  kPcaSample = 7,
  kBenchmark = 8,
  kTestPoint = 9,
};

/// Stream id with the tag in the top 16 bits and the work-item index below.
constexpr std::uint64_t stream_id(StreamTag tag, std::uint64_t index) {
  return (static_cast<std::uint64_t>(tag) << 48) | (index & ((std::uint64_t{1} << 48) - 1));
}

/// A uniform random bit generator over one counter-based stream.
class RngStream {
 public:
  using result_type = std::uint32_t;

  RngStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}
  RngStream(std::uint64_t seed, StreamTag tag, std::uint64_t index) : RngStream(seed, stream_id(tag, index)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (lane_ == 4) refill();
    return buffer_[lane_++];
  }

  /// Uniform on the open interval (0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = (*this)() >> 5;  // 27 bits
    const std::uint64_t lo = (*this)() >> 6;  // 26 bits
    const double u = static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
    return u + 0x1.0p-54;
  }

  /// Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform()));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t stream() const { return stream_; }

 private:
  void refill() {
    const Philox4x32Block counter{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                                  static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    buffer_ = philox4x32_10(counter, key_);
    ++block_;
    lane_ = 0;
  }

  Philox4x32Key key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  Philox4x32Block buffer_{};
  int lane_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace bayesgrid
