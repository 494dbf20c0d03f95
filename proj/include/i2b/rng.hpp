#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace i2b {

// Deterministic random source. mt19937_64 has a standardized sequence, and
// every distribution here is hand-rolled on top of it, so draws are
// bit-identical across platforms and standard-library versions.
//
// Streams are derived, not shared: fork() hashes a purpose tag plus integer
// coordinates into a fresh seed, so e.g. the rollout stream for
// (iter 3, prompt 1, sample 2) never depends on how many draws any other
// stream consumed. That independence is what makes ablation modes that skip
// whole phases (branching, CVAE) leave the remaining streams untouched.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Child stream keyed by (parent seed, tag, a, b, c). FNV-1a over the
  // byte string; collisions are irrelevant at this scale.
  Rng fork(std::string_view tag, std::uint64_t a = 0, std::uint64_t b = 0,
           std::uint64_t c = 0) const {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 1099511628211ull;
      }
    };
    mix(seed_);
    for (char ch : tag) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ull;
    }
    mix(a);
    mix(b);
    mix(c);
    return Rng(h);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1). 53-bit mantissa fill.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return lo + static_cast<std::int64_t>(next_u64());  // full range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % span);
  }

  // Standard normal via Box-Muller; one value per call, spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Index draw from unnormalized nonnegative weights by cumulative inversion.
  // Caller guarantees a strictly positive total.
  int categorical(const double* w, int n) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += w[i];
    double u = uniform() * total;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += w[i];
      if (u < acc) return i;
    }
    return n - 1;  // u landed on the rounding slack at the top
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace i2b
