#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "kbflow/errors.hpp"
#include "kbflow/model.hpp"

namespace kbflow {

struct ScalarEquilibria {
  double rho_minus = 0.0;
  double rho_plus = 0.0;
  double zeta_minus = 0.0;
  double zeta_plus = 0.0;
};

inline ScalarEquilibria equilibria(const ScalarModel& m) {
  ScalarEquilibria e;
  const double r = std::sqrt(m.A * m.A + m.R * m.S);
  e.rho_plus = (m.A + r) / m.S;
  e.rho_minus = (m.A - r) / m.S;
  const double c = 1.5 * m.A / m.S;
  const double w = std::sqrt(c * c + 3.0 * m.R / m.S);
  e.zeta_minus = c - w;
  e.zeta_plus = c + w;
  return e;
}

inline double scalar_ricc(const ScalarModel& m, double x) { return 2.0 * m.A * x - m.S * x * x + m.R; }

// Double-well potential whose derivative is the Riccati drift.
inline double double_well(const ScalarModel& m, double x) {
  auto e = equilibria(m);
  return -(m.S / 3.0) * x * (x - e.zeta_minus) * (x - e.zeta_plus);
}

inline double scalar_sigma(const ScalarModel& m, double kappa, double x) { return m.R + kappa * m.S * x * x; }

// Squared diffusion coefficient of the scalar covariance diffusion,
// (4/N) x Sigma_kappa(x).
inline double langevin_diffusion_sq(const ScalarModel& m, double kappa, int N, double x) {
  return 4.0 / N * x * scalar_sigma(m, kappa, x);
}

inline double contraction_rate(const ScalarModel& m) { return std::sqrt(m.A * m.A + m.R * m.S); }

// phi_t(Q) in closed form.
inline double scalar_riccati(const ScalarModel& m, double Q, double t) {
  auto e = equilibria(m);
  const double a = e.rho_plus, b = e.rho_minus;
  double y = (Q - a) / (Q - b) * std::exp(-m.S * (a - b) * t);
  return (a - b * y) / (1.0 - y);
}

// Smallest N with (2n - 4)/N < 1.
inline int moment_threshold(int n) {
  if (n < 1) throw Error("moment_threshold: n must be at least 1");
  return std::max(1, 2 * n - 3);
}

inline bool vanilla_moment_diverges(int N, int n) { return N <= 2 * (n - 2); }

namespace detail {

inline double log_add_exp(double a, double b) {
  double hi = std::max(a, b), lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

}  // namespace detail

struct MomentResult {
  bool divergent = false;
  double value = std::numeric_limits<double>::quiet_NaN();
};

// Normalized stationary density of the scalar sample variance, evaluated in
// log-space. Integrals are taken in u = log x with adaptive Gauss-Kronrod.
class InvariantDensity {
 public:
  InvariantDensity(const ScalarModel& m, double kappa, int N) : m_(m), kappa_(kappa), N_(N) {
    if (N < 1) throw Error("invariant_density: N must be at least 1");
    if (kappa != 0.0 && kappa != 1.0) throw Error("invariant_density: kappa must be 0 or 1");
    auto g = [this](double u) { return log_unnormalized_u(u) + u; };
    auto range = support_range(g);
    u_lo_ = range.lo;
    u_hi_ = range.hi;
    shift_ = range.peak;
    const int cells = 4000;
    du_ = (u_hi_ - u_lo_) / cells;
    cum_.assign(cells + 1, 0.0);
    for (int j = 0; j < cells; ++j) cum_[j + 1] = cum_[j] + cell_integral(u_lo_ + j * du_, u_lo_ + (j + 1) * du_);
    mass_ = cum_.back();
    log_norm_ = std::log(mass_) + shift_;
  }

  double kappa() const { return kappa_; }
  int N() const { return N_; }
  const ScalarModel& model() const { return m_; }
  double log_normalization() const { return log_norm_; }

  // log of the unnormalized density at x = e^u
  double log_unnormalized_u(double u) const {
    const double x = std::exp(u);
    const double Nd = static_cast<double>(N_);
    if (kappa_ == 0.0) {
      double z = x - 2.0 * m_.A / m_.S;
      return (Nd / 2.0 - 1.0) * u - m_.S * Nd / (4.0 * m_.R) * z * z;
    }
    double L = detail::log_add_exp(std::log(m_.R), std::log(m_.S) + 2.0 * u);
    double c = Nd * m_.A / std::sqrt(m_.R * m_.S);
    return c * std::atan(x * std::sqrt(m_.S / m_.R)) + (Nd / 2.0) * (u - L) - u - L;
  }

  double log_density(double x) const {
    if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
    return log_unnormalized_u(std::log(x)) - log_norm_;
  }

  double operator()(double x) const {
    if (!(x > 0.0)) return 0.0;
    return std::exp(log_density(x));
  }

  double cdf(double x) const {
    if (!(x > 0.0)) return 0.0;
    double u = std::log(x);
    if (u <= u_lo_) return 0.0;
    if (u >= u_hi_) return 1.0;
    auto j = static_cast<std::size_t>((u - u_lo_) / du_);
    j = std::min(j, cum_.size() - 2);
    double a = u_lo_ + static_cast<double>(j) * du_;
    double v = (cum_[j] + cell_integral(a, u)) / mass_;
    return std::clamp(v, 0.0, 1.0);
  }

  double quantile(double p) const {
    if (!(p > 0.0 && p < 1.0)) throw Error("quantile: p must lie in (0, 1)");
    double target = p * mass_;
    auto it = std::upper_bound(cum_.begin(), cum_.end(), target);
    std::size_t j = std::clamp<std::size_t>(static_cast<std::size_t>(it - cum_.begin()), 1, cum_.size() - 1) - 1;
    double lo = u_lo_ + static_cast<double>(j) * du_, hi = lo + du_;
    for (int it2 = 0; it2 < 60; ++it2) {
      double mid = 0.5 * (lo + hi);
      if (cum_[j] + cell_integral(u_lo_ + static_cast<double>(j) * du_, mid) < target)
        lo = mid;
      else
        hi = mid;
    }
    return std::exp(0.5 * (lo + hi));
  }

  double mode() const {
    auto g = [this](double u) { return log_unnormalized_u(u); };
    return std::exp(locate_peak(g, u_lo_, u_hi_).u);
  }

  // E[x^n]; the analytic rule decides divergence for kappa = 1.
  MomentResult moment(int n) const {
    if (n < 1) throw Error("invariant_moment: n must be at least 1");
    MomentResult r;
    if (kappa_ == 1.0 && vanilla_moment_diverges(N_, n)) {
      r.divergent = true;
      r.value = std::numeric_limits<double>::infinity();
      return r;
    }
    const double nd = n;
    auto g = [this, nd](double u) { return log_unnormalized_u(u) + (nd + 1.0) * u; };
    r.value = std::exp(log_integral(g) - log_norm_);
    return r;
  }

  // E[exp(alpha x) 1{x <= x_max}], used to expose the lack of exponential moments.
  double truncated_exponential_moment(double alpha, double x_max) const {
    auto f = [this, alpha](double u) { return std::exp(log_unnormalized_u(u) + u + alpha * std::exp(u) - log_norm_); };
    double lo = u_lo_, hi = std::log(x_max);
    if (hi <= lo) return 0.0;
    double total = 0.0;
    const int pieces = 400;
    double h = (hi - lo) / pieces;
    for (int k = 0; k < pieces; ++k)
      total += boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, lo + k * h, lo + (k + 1) * h, 8, 1e-12);
    return total;
  }

 private:
  struct Peak {
    double u, value;
  };
  struct Range {
    double lo, hi, peak;
  };

  template <class G>
  static Peak locate_peak(G&& g, double lo, double hi) {
    double best = -std::numeric_limits<double>::infinity(), best_u = lo;
    const int n = 16000;
    double h = (hi - lo) / n;
    for (int k = 0; k <= n; ++k) {
      double u = lo + k * h;
      double v = g(u);
      if (v > best) {
        best = v;
        best_u = u;
      }
    }
    double a = best_u - h, b = best_u + h;
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    for (int it = 0; it < 80; ++it) {
      double c = b - r * (b - a), d = a + r * (b - a);
      if (g(c) > g(d))
        b = d;
      else
        a = c;
    }
    double u = 0.5 * (a + b);
    return {u, g(u)};
  }

  // Interval in u outside of which the integrand exp(g) has dropped by e^-40.
  template <class G>
  static Range support_range(G&& g) {
    Peak pk = locate_peak(g, -60.0, 340.0);
    const double drop = 40.0;
    auto walk = [&](double dir) {
      double step = 1e-3, u = pk.u;
      for (int k = 0; k < 4000; ++k) {
        u += dir * step;
        if (u < -700.0 || u > 345.0) break;
        if (g(u) < pk.value - drop) return u;
        step = std::min(step * 1.25, 0.5);
      }
      return u;
    };
    return {walk(-1.0), walk(1.0), pk.value};
  }

  template <class G>
  double log_integral(G&& g) const {
    Range range = support_range(g);
    double pk = range.peak;
    auto f = [&](double u) { return std::exp(g(u) - pk); };
    const int pieces = 200;
    double h = (range.hi - range.lo) / pieces;
    double total = 0.0;
    for (int k = 0; k < pieces; ++k)
      total += boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, range.lo + k * h, range.lo + (k + 1) * h,
                                                                              10, 1e-13);
    return std::log(total) + pk;
  }

  double cell_integral(double a, double b) const {
    if (b <= a) return 0.0;
    auto f = [this](double u) { return std::exp(log_unnormalized_u(u) + u - shift_); };
    return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, 6, 1e-13);
  }

  ScalarModel m_;
  double kappa_;
  int N_;
  double u_lo_ = 0.0, u_hi_ = 0.0, du_ = 0.0;
  double shift_ = 0.0, mass_ = 1.0, log_norm_ = 0.0;
  std::vector<double> cum_;
};

inline InvariantDensity invariant_density(const ScalarModel& m, double kappa, int N) {
  return InvariantDensity(m, kappa, N);
}

inline MomentResult invariant_moment(const ScalarModel& m, double kappa, int N, int n) {
  if (kappa == 1.0 && vanilla_moment_diverges(N, n)) return {true, std::numeric_limits<double>::infinity()};
  return InvariantDensity(m, kappa, N).moment(n);
}

// Variance of the first-order fluctuation of sqrt(N)(phi_hat_t - phi_t):
// int_0^t E_{s->t}^4 * 4 phi_s Sigma_kappa(phi_s) ds.
inline double clt_variance_oracle(const ScalarModel& m, double kappa, double Q, double t, double rtol = 1e-8) {
  if (Q < 0.0) throw NotPSD("clt_variance_oracle: Q must be non-negative");
  if (t <= 0.0) return 0.0;
  auto e = equilibria(m);
  const double a = e.rho_plus, b = e.rho_minus;
  const double lam = m.S * (a - b);
  const double y0 = (Q - a) / (Q - b);
  auto integrand = [&](double s) -> Matrix {
    double ys = y0 * std::exp(-lam * s);
    double yt = y0 * std::exp(-lam * t);
    double phi = (a - b * ys) / (1.0 - ys);
    double e2 = std::exp(-lam * (t - s)) * std::pow((1.0 - ys) / (1.0 - yt), 2);
    return Matrix::Constant(1, 1, e2 * e2 * 4.0 * phi * scalar_sigma(m, kappa, phi));
  };
  return simpson_doubling(integrand, 0.0, t, rtol, 16).value(0, 0);
}

// A - S * (first moment of the invariant density).
inline double lyapunov_exponent(const ScalarModel& m, double kappa, int N) {
  return m.A - m.S * invariant_moment(m, kappa, N, 1).value;
}

struct LyapunovBounds {
  double lower = 0.0;
  double upper = 0.0;
};

// Stationary bounds on A - S E[phi_hat], valid for N > 4.
inline LyapunovBounds lyapunov_bounds(const ScalarModel& m, double kappa, int N) {
  if (N <= 4) throw BoundNotApplicable("lyapunov_bounds: need N > 4");
  const double a2 = m.A * m.A, rs = m.R * m.S, q = 4.0 / N;
  LyapunovBounds b;
  b.lower = -std::sqrt(a2 + rs);
  if (kappa == 0.0)
    b.upper = -std::sqrt(a2 + rs * (1.0 - q));
  else
    b.upper = -(std::sqrt(a2 + rs * (1.0 - q * q)) - q * m.A) / (1.0 + q);
  return b;
}

}  // namespace kbflow
