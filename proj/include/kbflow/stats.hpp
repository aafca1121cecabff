#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "kbflow/errors.hpp"

namespace kbflow {

// One-pass central moments up to order 9 (Pebay 2008 pairwise update).
class RunningMoments {
 public:
  static constexpr int max_order = 9;

  void add(double x) {
    RunningMoments one;
    one.n_ = 1;
    one.mean_ = x;
    merge(one);
  }

  void merge(const RunningMoments& b) {
    if (b.n_ == 0) return;
    if (n_ == 0) {
      *this = b;
      return;
    }
    const double na = static_cast<double>(n_), nb = static_cast<double>(b.n_);
    const double n = na + nb;
    const double delta = b.mean_ - mean_;
    std::array<double, max_order + 1> out{};
    for (int p = 2; p <= max_order; ++p) {
      double v = M_[p] + b.M_[p];
      for (int k = 1; k <= p - 2; ++k) {
        double c = binom(p, k) * std::pow(delta, k);
        v += c * (std::pow(-nb / n, k) * M_[p - k] + std::pow(na / n, k) * b.M_[p - k]);
      }
      v += std::pow(na * nb / n * delta, p) * (1.0 / std::pow(nb, p - 1) - std::pow(-1.0 / na, p - 1));
      out[p] = v;
    }
    M_ = out;
    mean_ += delta * nb / n;
    n_ += b.n_;
  }

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  // population central moment (divisor n)
  double central(int p) const {
    if (p < 2 || p > max_order) throw Error("central moment order out of range");
    return n_ ? M_[p] / static_cast<double>(n_) : std::numeric_limits<double>::quiet_NaN();
  }
  double variance() const { return n_ > 1 ? M_[2] / static_cast<double>(n_ - 1) : 0.0; }
  double standardized(int p) const { return central(p) / std::pow(central(2), 0.5 * p); }

 private:
  static double binom(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
  }

  std::size_t n_ = 0;
  double mean_ = 0.0;
  std::array<double, max_order + 1> M_{};
};

inline RunningMoments moments_of(const std::vector<double>& x) {
  RunningMoments m;
  for (double v : x) m.add(v);
  return m;
}

inline double mean_of(const std::vector<double>& x) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double variance_of(const std::vector<double>& x) { return moments_of(x).variance(); }

// E[|x|^n]^{1/n}
inline double ln_norm(const std::vector<double>& x, double n) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double v : x) s += std::pow(std::abs(v), n);
  return std::pow(s / static_cast<double>(x.size()), 1.0 / n);
}

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

struct ConfidenceInterval {
  double estimate = 0.0;
  double se = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.0;
};

inline ConfidenceInterval mean_ci(const std::vector<double>& x, double level = 0.95) {
  ConfidenceInterval ci;
  ci.level = level;
  ci.estimate = mean_of(x);
  ci.se = std::sqrt(variance_of(x) / static_cast<double>(x.size()));
  double z = normal_quantile(0.5 + 0.5 * level);
  ci.lower = ci.estimate - z * ci.se;
  ci.upper = ci.estimate + z * ci.se;
  return ci;
}

// One-sided interval [lower, inf) at the given level.
inline ConfidenceInterval lower_confidence_bound(const std::vector<double>& x, double level = 0.99) {
  ConfidenceInterval ci;
  ci.level = level;
  ci.estimate = mean_of(x);
  ci.se = std::sqrt(variance_of(x) / static_cast<double>(x.size()));
  ci.lower = ci.estimate - normal_quantile(level) * ci.se;
  ci.upper = std::numeric_limits<double>::infinity();
  return ci;
}

inline double ks_distance(std::vector<double> samples, const std::function<double(double)>& cdf) {
  if (samples.empty()) throw Error("ks_distance: no samples");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double F = cdf(samples[i]);
    d = std::max({d, (i + 1) / n - F, F - i / n});
  }
  return std::min(d, 1.0);
}

// Hill estimator of the tail index from the k largest order statistics.
inline double hill_tail_index(std::vector<double> samples, std::size_t k) {
  if (k < 2 || k >= samples.size()) throw Error("hill_tail_index: need 2 <= k < sample count");
  std::nth_element(samples.begin(), samples.begin() + static_cast<long>(k), samples.end(), std::greater<>());
  const double xk = samples[k];
  if (!(xk > 0.0)) throw Error("hill_tail_index: threshold order statistic must be positive");
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += std::log(samples[i] / xk);
  return static_cast<double>(k) / s;
}

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_slope = 0.0;
};

inline SlopeFit slope_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("slope_fit: need matching x and y");
  const double n = static_cast<double>(x.size());
  double mx = mean_of(x), my = mean_of(y);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw Error("slope_fit: degenerate x");
  SlopeFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double r = y[i] - f.intercept - f.slope * x[i];
    rss += r * r;
  }
  f.stderr_slope = n > 2 ? std::sqrt(rss / (n - 2) / sxx) : 0.0;
  return f;
}

inline double autocorrelation(const std::vector<double>& x, std::size_t lag) {
  if (lag >= x.size()) return 0.0;
  double m = mean_of(x);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    den += (x[i] - m) * (x[i] - m);
    if (i + lag < x.size()) num += (x[i] - m) * (x[i + lag] - m);
  }
  return den > 0.0 ? num / den : 0.0;
}

// Smallest spacing (doubling from 1) whose lag-1 autocorrelation of the
// thinned series drops below threshold.
inline std::size_t decorrelation_spacing(const std::vector<double>& x, double threshold = 0.1) {
  std::size_t lag = 1;
  while (lag < x.size() / 8) {
    if (autocorrelation(x, lag) < threshold) return lag;
    lag *= 2;
  }
  return lag;
}

inline std::vector<double> thin(const std::vector<double>& x, std::size_t every, std::size_t offset = 0) {
  std::vector<double> out;
  for (std::size_t i = offset; i < x.size(); i += std::max<std::size_t>(1, every)) out.push_back(x[i]);
  return out;
}

// Geometric mean over disjoint batches of the raw absolute moment E|x|^p.
inline double batched_moment(const std::vector<double>& x, std::size_t batch, int p) {
  if (batch < 2 || batch > x.size()) throw Error("batched_moment: bad batch size");
  std::size_t batches = x.size() / batch;
  double logsum = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    double acc = 0.0;
    for (std::size_t i = b * batch; i < (b + 1) * batch; ++i) acc += std::pow(std::abs(x[i]), p);
    logsum += std::log(acc / static_cast<double>(batch));
  }
  return std::exp(logsum / static_cast<double>(batches));
}

struct StabilityCheck {
  double ratio = 0.0;
  bool stable = false;
};

// Ratio of batched moment estimates at two batch sizes; stable when within
// [1/limit, limit].
inline StabilityCheck moment_stability(const std::vector<double>& x, std::size_t batch_lo, std::size_t batch_hi,
                                       int p, double limit = 1.5) {
  StabilityCheck c;
  c.ratio = batched_moment(x, batch_hi, p) / batched_moment(x, batch_lo, p);
  c.stable = c.ratio < limit && c.ratio > 1.0 / limit;
  return c;
}

}  // namespace kbflow
