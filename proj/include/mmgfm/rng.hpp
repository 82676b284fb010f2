// Counter-based random number generation (Philox4x32-10) with named streams.
// A (seed, stream) pair fully determines the sequence, so independent streams
// can be handed to parallel workers without coordination and every draw is
// reproducible across platforms and thread counts.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mmgfm {

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key0_(static_cast<std::uint32_t>(seed)),
        key1_(static_cast<std::uint32_t>(seed >> 32)),
        stream_(stream) {}

  std::uint32_t next_u32() {
    if (pos_ == 4) refill();
    return buf_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Standard normal via Box-Muller (cosine branch; one value per two draws).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Poisson draw; returned as double because large intensities exceed the int
  // range. Inversion for small mu, PTRS transformed rejection otherwise.
  double poisson(double mu) {
    if (!(mu > 0.0)) return 0.0;
    if (mu < 10.0) {
      const double limit = std::exp(-mu);
      double prod = uniform();
      double k = 0.0;
      while (prod > limit) {
        prod *= uniform();
        k += 1.0;
      }
      return k;
    }
    // Hormann (1993) PTRS
    const double smu = std::sqrt(mu);
    const double b = 0.931 + 2.53 * smu;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    const double log_mu = std::log(mu);
    for (;;) {
      double u = uniform() - 0.5;
      double v = uniform();
      const double us = 0.5 - std::abs(u);
      const double k = std::floor((2.0 * a / us + b) * u + mu + 0.43);
      if (us >= 0.07 && v <= v_r) return k;
      if (k < 0.0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
          k * log_mu - mu - std::lgamma(k + 1.0))
        return k;
    }
  }

  // Sum of Bernoulli draws; trial counts in this project are small.
  double binomial(double trials, double prob) {
    double x = 0.0;
    for (double t = 0.0; t < trials; t += 1.0)
      if (uniform() < prob) x += 1.0;
    return x;
  }

 private:
  static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                      std::uint32_t& lo) {
    const std::uint64_t prod = std::uint64_t(a) * std::uint64_t(b);
    hi = static_cast<std::uint32_t>(prod >> 32);
    lo = static_cast<std::uint32_t>(prod);
  }

  void refill() {
    std::uint32_t c0 = static_cast<std::uint32_t>(ctr_);
    std::uint32_t c1 = static_cast<std::uint32_t>(ctr_ >> 32);
    std::uint32_t c2 = static_cast<std::uint32_t>(stream_);
    std::uint32_t c3 = static_cast<std::uint32_t>(stream_ >> 32);
    std::uint32_t k0 = key0_, k1 = key1_;
    for (int round = 0; round < 10; ++round) {
      std::uint32_t hi0, lo0, hi1, lo1;
      mulhilo(0xD2511F53u, c0, hi0, lo0);
      mulhilo(0xCD9E8D57u, c2, hi1, lo1);
      const std::uint32_t n0 = hi1 ^ c1 ^ k0;
      const std::uint32_t n1 = lo1;
      const std::uint32_t n2 = hi0 ^ c3 ^ k1;
      const std::uint32_t n3 = lo0;
      c0 = n0; c1 = n1; c2 = n2; c3 = n3;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    buf_ = {c0, c1, c2, c3};
    ++ctr_;
    pos_ = 0;
  }

  std::uint32_t key0_, key1_;
  std::uint64_t stream_;
  std::uint64_t ctr_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int pos_ = 4;
};

}  // namespace mmgfm
