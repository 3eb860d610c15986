#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pdfd {

// Named, independent random streams derived from a single run seed.
// Every consumer (augmentation, t-sampling, noise draws, class sampling,
// shuffles, init) owns a stream keyed by (seed, name, a, b), so toggling one
// component never perturbs another component's draws. mt19937_64 and the
// derivation below are fully specified, so sequences are bit-stable across
// platforms; normal/uniform variates are generated in-house rather than via
// the implementation-defined stdlib distributions.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view name, std::uint64_t a = 0,
            std::uint64_t b = 0)
      : engine_(mix(seed, name, a, b)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53 bits of mantissa.
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform double in [lo, hi).
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased and
  // deterministic for a given stream state.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  // Standard normal via Box-Muller; pairs are cached.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  std::vector<double> gaussian_vector(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = next_gaussian();
    return out;
  }

  // Fisher-Yates shuffle of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (const char c : s) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ull;
    }
    return h;
  }

  // splitmix64 finalizer; spreads the key material before seeding.
  static std::uint64_t split(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  static std::mt19937_64 mix(std::uint64_t seed, std::string_view name,
                             std::uint64_t a, std::uint64_t b) {
    const std::uint64_t h = fnv1a(name);
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h),
                      static_cast<std::uint32_t>(h >> 32),
                      static_cast<std::uint32_t>(split(a ^ h)),
                      static_cast<std::uint32_t>(split(a ^ h) >> 32),
                      static_cast<std::uint32_t>(split(b + 0x51ul)),
                      static_cast<std::uint32_t>(split(b + 0x51ul) >> 32)};
    return std::mt19937_64(seq);
  }

  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pdfd
