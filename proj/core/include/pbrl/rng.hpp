#pragma once

#include <cmath>
#include <cstdint>

namespace pbrl {

// Counter-based random streams: every draw is a pure function of (key, counter),
// so any member's stream can be replayed in isolation and in any order.  This is
// what lets a vectorized population update reproduce N single-agent updates
// bit for bit.

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Distinguishes independent draw families hanging off the same (seed, member).
enum class RngUse : std::uint64_t {
  kInitWeight = 1,
  kInitBias,
  kExploreNoise,
  kTargetNoise,
  kSacEps,
  kSacEpsTarget,
  kSample,
  kDonorChoice,
  kHyperDraw,
  kCemDraw,
  kEnvReset,
  kGeneric,
};

struct RngStream {
  std::uint64_t key = 0;

  static RngStream of(std::uint64_t seed, std::uint64_t stream_id, RngUse use,
                      std::uint64_t step = 0) {
    std::uint64_t k = mix64(seed);
    k = mix64(k ^ stream_id);
    k = mix64(k ^ static_cast<std::uint64_t>(use));
    k = mix64(k ^ step);
    return RngStream{k};
  }

  std::uint64_t bits(std::uint64_t counter) const { return mix64(key ^ mix64(counter)); }

  /// Uniform in [0, 1).
  double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  /// Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(std::uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(counter);
  }

  /// Standard normal via Box-Muller; consumes counters (c, c+1).
  /// Callers drawing per element must stride counters by two.
  double normal_pair(std::uint64_t counter) const {
    const double u1 = uniform_pos(counter);
    const double u2 = uniform(counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.28318530717958647692 * u2);
  }
};

/// Stateful convenience wrapper when replay-by-counter is not needed.
struct RngSequence {
  RngStream stream;
  std::uint64_t next = 0;

  explicit RngSequence(RngStream s) : stream(s) {}
  RngSequence(std::uint64_t seed, std::uint64_t stream_id, RngUse use, std::uint64_t step = 0)
      : stream(RngStream::of(seed, stream_id, use, step)) {}

  std::uint64_t bits() { return stream.bits(next++); }
  double uniform() { return stream.uniform(next++); }
  double uniform(double lo, double hi) { return stream.uniform(next++, lo, hi); }
  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }
  double normal() {
    const std::uint64_t c = next;
    next += 2;
    return stream.normal_pair(c);
  }
  /// Uniform index in [0, n).  Modulo bias is negligible for n << 2^64.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(bits() % n); }
};

}  // namespace pbrl
