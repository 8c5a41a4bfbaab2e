#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

namespace pcnprobe {

// SplitMix64 finaliser. Used as a counter-based generator: draw i of a stream
// is mix(seed, i), so a stream is fully described by (seed, position).
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Deterministic random stream. Gaussian draws use the Box-Muller cosine
/// branch and consume two uniforms each, so the position advances by two.
class RngStream {
 public:
  constexpr RngStream() = default;
  constexpr explicit RngStream(std::uint64_t seed, std::uint64_t position = 0) noexcept
      : seed_(seed), position_(position) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr std::uint64_t position() const noexcept { return position_; }

  constexpr std::uint64_t next_u64() noexcept {
    return splitmix64(splitmix64(seed_) ^ (position_++ * 0xD1B54A32D192ED03ull));
  }

  /// Uniform on [0, 1) with 53 bits of resolution.
  constexpr double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). Rejection sampling keeps the draw unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  double normal() noexcept {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream, keyed by an arbitrary tag.
  constexpr RngStream derive(std::uint64_t tag) const noexcept {
    return RngStream(splitmix64(seed_ ^ splitmix64(tag + 0x632BE59BD9B4E019ull)), 0);
  }
  constexpr RngStream derive(std::uint64_t a, std::uint64_t b) const noexcept { return derive(a).derive(b); }

  friend constexpr bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t position_ = 0;
};

/// Fisher-Yates with the stream's unbiased integer draws; identical on every
/// platform, unlike std::shuffle.
template <typename T>
void shuffle(std::span<T> items, RngStream& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

inline std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  shuffle(std::span<std::size_t>(p), rng);
  return p;
}

}  // namespace pcnprobe
