#pragma once

// Seeded random number generation with explicit sampler algorithms so that
// results are reproducible across platforms and standard-library versions.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace plntree {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** seeded through splitmix64. Substreams are derived by mixing a
// stream identifier into the seed, so independent components can draw from
// disjoint streams of one master seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::uint64_t sm = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    for (auto& si : s_) si = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1), guarded away from exact zero for log() callers.
  double uniform_pos() {
    double u = uniform();
    return u > 0.0 ? u : 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t uniform_int(std::uint64_t n) {
    // Lemire-style rejection, unbiased.
    std::uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      std::uint64_t t = -n % n;
      while (lo < t) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Poisson: multiplicative inversion below 30, PTRS transformed rejection
  // above (Hormann 1993), both exact.
  std::int64_t poisson(double rate) {
    if (!(rate >= 0.0)) throw std::invalid_argument("poisson: negative rate");
    if (rate == 0.0) return 0;
    if (rate < 30.0) {
      const double bound = std::exp(-rate);
      double prod = uniform_pos();
      std::int64_t k = 0;
      while (prod > bound) {
        prod *= uniform_pos();
        ++k;
      }
      return k;
    }
    return poisson_ptrs(rate);
  }

  // Binomial: inversion for small n*min(p,1-p), BTRS rejection otherwise.
  std::int64_t binomial(std::int64_t n, double p) {
    if (n < 0 || p < 0.0 || p > 1.0) throw std::invalid_argument("binomial: bad parameters");
    if (n == 0 || p == 0.0) return 0;
    if (p == 1.0) return n;
    const bool flip = p > 0.5;
    const double q = flip ? 1.0 - p : p;
    std::int64_t draw;
    if (static_cast<double>(n) * q < 10.0) {
      draw = binomial_inversion(n, q);
    } else {
      draw = binomial_btrs(n, q);
    }
    return flip ? n - draw : draw;
  }

  // Gamma(shape, 1): Marsaglia-Tsang squeeze, with the boost for shape < 1.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      const double u = uniform_pos();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(const std::vector<double>& alpha) {
    std::vector<double> g(alpha.size());
    double total = 0.0;
    for (size_t i = 0; i < alpha.size(); ++i) {
      g[i] = gamma(alpha[i]);
      total += g[i];
    }
    if (total <= 0.0) {
      // All gammas underflowed; fall back to the argmax of alpha.
      size_t best = 0;
      for (size_t i = 1; i < alpha.size(); ++i)
        if (alpha[i] > alpha[best]) best = i;
      std::vector<double> out(alpha.size(), 0.0);
      out[best] = 1.0;
      return out;
    }
    for (auto& x : g) x /= total;
    return g;
  }

  // Multinomial through sequential conditional binomials.
  std::vector<std::int64_t> multinomial(std::int64_t n, const std::vector<double>& probs) {
    std::vector<std::int64_t> out(probs.size(), 0);
    double rest = 0.0;
    for (double p : probs) rest += p;
    std::int64_t remaining = n;
    for (size_t j = 0; j + 1 < probs.size() && remaining > 0; ++j) {
      const double cond = rest > 0.0 ? std::min(1.0, std::max(0.0, probs[j] / rest)) : 0.0;
      out[j] = binomial(remaining, cond);
      remaining -= out[j];
      rest -= probs[j];
    }
    if (!probs.empty()) out.back() += remaining;
    return out;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::int64_t poisson_ptrs(double rate) {
    const double slam = std::sqrt(rate);
    const double loglam = std::log(rate);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      const double u = uniform() - 0.5;
      const double v = uniform_pos();
      const double us = 0.5 - std::fabs(u);
      const double k = std::floor((2.0 * a / us + b) * u + rate + 0.43);
      if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(k);
      if (k < 0.0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
          k * loglam - rate - std::lgamma(k + 1.0)) {
        return static_cast<std::int64_t>(k);
      }
    }
  }

  std::int64_t binomial_inversion(std::int64_t n, double p) {
    const double q = 1.0 - p;
    const double s = p / q;
    const double base = static_cast<double>(n) * std::log(q);
    std::int64_t k = 0;
    double logpmf = base;
    double u = std::log(uniform_pos());
    // Walk the CDF in log space to stay stable for large n.
    double logcdf = logpmf;
    while (u > logcdf && k < n) {
      ++k;
      logpmf += std::log(s) + std::log((static_cast<double>(n) - k + 1.0) / static_cast<double>(k));
      logcdf = logcdf + std::log1p(std::exp(logpmf - logcdf));
    }
    return k;
  }

  std::int64_t binomial_btrs(std::int64_t n, double p) {
    // Hormann's BTRS, valid for n*p >= 10 with p <= 0.5.
    const double nf = static_cast<double>(n);
    const double spq = std::sqrt(nf * p * (1.0 - p));
    const double b = 1.15 + 2.53 * spq;
    const double a = -0.0873 + 0.0248 * b + 0.01 * p;
    const double c = nf * p + 0.5;
    const double vr = 0.92 - 4.2 / b;
    const double urvr = 0.86 * vr;
    const double alpha = (2.83 + 5.1 / b) * spq;
    const double lpq = std::log(p / (1.0 - p));
    const double m = std::floor((nf + 1.0) * p);
    const double h = std::lgamma(m + 1.0) + std::lgamma(nf - m + 1.0);
    for (;;) {
      double v = uniform_pos();
      double u;
      if (v <= urvr) {
        u = v / vr - 0.43;
        return static_cast<std::int64_t>(std::floor((2.0 * a / (0.5 - std::fabs(u)) + b) * u + c));
      }
      if (v >= vr) {
        u = uniform() - 0.5;
      } else {
        u = v / vr - 0.93;
        u = (u < 0.0 ? -0.5 : 0.5) - u;
        v = uniform_pos() * vr;
      }
      const double us = 0.5 - std::fabs(u);
      const double k = std::floor((2.0 * a / us + b) * u + c);
      if (k < 0.0 || k > nf) continue;
      v = v * alpha / (a / (us * us) + b);
      if (std::log(v) <= h - std::lgamma(k + 1.0) - std::lgamma(nf - k + 1.0) + (k - m) * lpq) {
        return static_cast<std::int64_t>(k);
      }
    }
  }

  std::uint64_t s_[4]{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace plntree
