#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "kbflow/scalar.hpp"

using namespace kbflow;

namespace {

// Stationary density of dP = Ricc(P) dt + sqrt(diffusion_sq(P)) dB built
// directly from the zero-flux condition, integrated on a log grid with the
// trapezoid rule. Shares no code with InvariantDensity.
struct FluxOracle {
  std::vector<double> x, w;  // grid and unnormalised weights (density * dx)

  FluxOracle(const ScalarModel& m, double kappa, int N, double lo, double hi, int n = 400000) {
    auto b = [&](double p) { return 2.0 * m.A * p - m.S * p * p + m.R; };
    auto a = [&](double p) { return 4.0 / N * p * (m.R + kappa * m.S * p * p); };
    auto da = [&](double p) { return 4.0 / N * (m.R + 3.0 * kappa * m.S * p * p); };
    auto g = [&](double p) { return (2.0 * b(p) - da(p)) / a(p); };  // d log density / dp
    const double ul = std::log(lo), uh = std::log(hi), du = (uh - ul) / n;
    double logd = 0.0;
    std::vector<double> lw;
    for (int i = 0; i <= n; ++i) {
      double u = ul + i * du;
      double p = std::exp(u);
      if (i > 0) {
        double p0 = std::exp(u - du);
        logd += 0.5 * (g(p0) * p0 + g(p) * p) * du;
      }
      x.push_back(p);
      lw.push_back(logd + u);  // density * dx/du
    }
    double mx = *std::max_element(lw.begin(), lw.end());
    double total = 0.0;
    for (int i = 0; i <= n; ++i) {
      double v = std::exp(lw[i] - mx) * du * ((i == 0 || i == n) ? 0.5 : 1.0);
      w.push_back(v);
      total += v;
    }
    for (double& v : w) v /= total;
  }

  double moment(int k) const {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * std::pow(x[i], k);
    return s;
  }
};

}  // namespace

TEST(Scalar, Equilibria) {
  auto e = equilibria(ScalarModel(0.0, 1.0, 1.0));
  EXPECT_NEAR(e.rho_plus, 1.0, 1e-15);
  EXPECT_NEAR(e.rho_minus, -1.0, 1e-15);
  ScalarModel m(20.0, 1.0, 1.0);
  auto f = equilibria(m);
  EXPECT_NEAR(f.rho_plus, 20.0 + std::sqrt(401.0), 1e-12);
  EXPECT_NEAR(f.rho_plus * f.rho_minus, -m.R / m.S, 1e-12);
  EXPECT_NEAR(scalar_ricc(m, f.rho_plus), 0.0, 1e-11);
  EXPECT_NEAR(scalar_ricc(m, f.rho_minus), 0.0, 1e-12);
  EXPECT_NEAR(double_well(m, f.zeta_minus), 0.0, 1e-9);
  EXPECT_NEAR(double_well(m, f.zeta_plus), 0.0, 1e-9);
  EXPECT_NEAR(double_well(m, 0.0), 0.0, 1e-15);
  EXPECT_LT(f.zeta_minus, 0.0);
  EXPECT_GT(f.zeta_plus, 0.0);
  // derivative of the double well is the Riccati drift
  for (double x : {0.3, 5.0, 41.0}) {
    double h = 1e-5 * (1.0 + x);
    EXPECT_NEAR((double_well(m, x + h) - double_well(m, x - h)) / (2 * h), scalar_ricc(m, x), 1e-5 * (1.0 + x * x));
  }
}

TEST(Scalar, RhoPlusMonotone) {
  for (double A : {-2.0, 0.0, 3.0})
    for (double R : {0.5, 2.0})
      for (double S : {0.5, 2.0}) {
        const double h = 1e-6;
        auto rp = [](double a, double r, double s) { return equilibria(ScalarModel(a, r, s)).rho_plus; };
        EXPECT_GT(rp(A + h, R, S) - rp(A - h, R, S), 0.0);
        EXPECT_GT(rp(A, R + h, S) - rp(A, R - h, S), 0.0);
        EXPECT_LT(rp(A, R, S + h) - rp(A, R, S - h), 0.0);
      }
}

TEST(Scalar, ContractionRate) {
  EXPECT_NEAR(contraction_rate(ScalarModel(0.0, 1.0, 1.0)), 1.0, 1e-15);
  ScalarModel m(20.0, 1.0, 1.0);
  EXPECT_NEAR(contraction_rate(m), std::sqrt(401.0), 1e-12);
  EXPECT_NEAR(contraction_rate(m), -(m.A - equilibria(m).rho_plus * m.S), 1e-12);
}

TEST(Scalar, ClosedFormRiccati) {
  ScalarModel m(0.0, 1.0, 1.0);
  for (double t : {0.5, 1.0, 2.0}) EXPECT_NEAR(scalar_riccati(m, 0.0, t), std::tanh(t), 1e-14);
  EXPECT_NEAR(scalar_riccati(ScalarModel(20.0, 1.0, 1.0), 0.0, 1.0), 20.0 + std::sqrt(401.0), 1e-10);
}

TEST(Scalar, MomentThresholds) {
  EXPECT_EQ(moment_threshold(2), 1);
  EXPECT_EQ(moment_threshold(5), 7);
  EXPECT_EQ(moment_threshold(3), 3);
  for (int n = 1; n <= 10; ++n) {
    int N0 = moment_threshold(n);
    EXPECT_FALSE(vanilla_moment_diverges(N0, n));
    if (N0 > 1) EXPECT_TRUE(vanilla_moment_diverges(N0 - 1, n));
  }
}

TEST(InvariantDensityTest, Normalised) {
  ScalarModel m(20.0, 1.0, 1.0);
  for (double kappa : {0.0, 1.0}) {
    InvariantDensity g(m, kappa, 6);
    EXPECT_NEAR(g.cdf(1e12), 1.0, 1e-6);
    EXPECT_NEAR(g.cdf(1e-12), 0.0, 1e-6);
    double q = g.quantile(0.3);
    EXPECT_NEAR(g.cdf(q), 0.3, 1e-9);
  }
}

TEST(InvariantDensityTest, MatchesZeroFluxOracle) {
  for (auto [A, N] : std::vector<std::pair<double, int>>{{20.0, 6}, {1.0, 10}, {-2.0, 12}}) {
    ScalarModel m(A, 1.0, 1.0);
    for (double kappa : {0.0, 1.0}) {
      InvariantDensity g(m, kappa, N);
      FluxOracle o(m, kappa, N, 1e-8, kappa == 1.0 ? 1e9 : 200.0);
      EXPECT_NEAR(g.moment(1).value, o.moment(1), 2e-4 * o.moment(1)) << A << " " << kappa;
      EXPECT_NEAR(g.moment(2).value, o.moment(2), 2e-4 * o.moment(2)) << A << " " << kappa;
    }
  }
}

TEST(InvariantDensityTest, ZeroFluxResidual) {
  ScalarModel m(20.0, 1.0, 1.0);
  const int N = 6;
  for (double kappa : {0.0, 1.0}) {
    InvariantDensity g(m, kappa, N);
    double peak = g(g.mode());
    for (double x : {5.0, 20.0, 30.0, 40.0, 45.0, 80.0}) {
      const double h = 1e-4 * x;
      auto a = [&](double p) { return langevin_diffusion_sq(m, kappa, N, p); };
      double flux = scalar_ricc(m, x) * g(x) - 0.5 * (a(x + h) * g(x + h) - a(x - h) * g(x - h)) / (2 * h);
      EXPECT_LT(std::abs(flux) / (peak * a(x)), 1e-6) << "kappa=" << kappa << " x=" << x;
    }
  }
}

TEST(InvariantDensityTest, StiffScalarValues) {
  ScalarModel m(20.0, 1.0, 1.0);
  InvariantDensity g0(m, 0.0, 6);
  // mode solves 2/x = 3(x - 40)
  double root = (40.0 + std::sqrt(1600.0 + 8.0 / 3.0)) / 2.0;
  EXPECT_NEAR(g0.mode(), root, 1e-6);
  InvariantDensity g1(m, 1.0, 6);
  EXPECT_NEAR(g1.moment(1).value, 30.0208, 1e-3);
  EXPECT_NEAR(g0.moment(1).value, 40.0167, 1e-3);
}

TEST(InvariantDensityTest, VanillaPowerTail) {
  ScalarModel m(20.0, 1.0, 1.0);
  InvariantDensity g(m, 1.0, 6);
  double slope = (g.log_density(1e5) - g.log_density(1e3)) / (std::log(1e5) - std::log(1e3));
  EXPECT_NEAR(slope, -6.0, 0.05);
}

TEST(InvariantDensityTest, BehaviourNearZero) {
  // x^(N/2 - 1) near the origin
  for (int N : {1, 2, 6}) {
    InvariantDensity g(ScalarModel(1.0, 1.0, 1.0), 1.0, N);
    EXPECT_GT(g(1e-3), 0.0);
    EXPECT_GT(g(1e3), 0.0);
    double slope = (g.log_density(1e-10) - g.log_density(1e-8)) / std::log(1e-2);
    EXPECT_NEAR(slope, N / 2.0 - 1.0, 1e-6);
  }
  EXPECT_LT(InvariantDensity(ScalarModel(1.0, 1.0, 1.0), 1.0, 6)(1e-12), 1e-6);
}

TEST(InvariantDensityTest, MomentExistence) {
  ScalarModel m(20.0, 1.0, 1.0);
  EXPECT_TRUE(invariant_moment(m, 1.0, 6, 5).divergent);
  auto four = invariant_moment(m, 1.0, 6, 4);
  EXPECT_FALSE(four.divergent);
  EXPECT_TRUE(std::isfinite(four.value));
  for (int n = 1; n <= 10; ++n) EXPECT_FALSE(invariant_moment(m, 0.0, 6, n).divergent);
}

TEST(InvariantDensityTest, VanillaHasNoExponentialMoments) {
  InvariantDensity g(ScalarModel(1.0, 1.0, 1.0), 1.0, 10);
  for (double alpha : {1e-3, 1e-2}) {
    double prev = g.truncated_exponential_moment(alpha, 1e3);
    double grown = g.truncated_exponential_moment(alpha, 1e5);
    EXPECT_GT(grown, 1e3 * prev);
  }
  InvariantDensity d(ScalarModel(1.0, 1.0, 1.0), 0.0, 10);
  EXPECT_NEAR(d.truncated_exponential_moment(0.1, 1e2), d.truncated_exponential_moment(0.1, 1e3), 1e-8);
}

TEST(CltOracle, MatchesVarianceOde) {
  // v' = 4 (A - phi S) v + 4 phi Sigma(phi), v(0) = 0, integrated with fine RK4
  for (double kappa : {0.0, 1.0}) {
    for (double Q : {0.0, 2.0}) {
      ScalarModel m(1.0, 1.0, 1.0);
      const double t = 1.0;
      const int n = 20000;
      const double h = t / n;
      auto rhs = [&](double s, double v) {
        double phi = scalar_riccati(m, Q, s);
        return 4.0 * (m.A - phi * m.S) * v + 4.0 * phi * scalar_sigma(m, kappa, phi);
      };
      double v = 0.0;
      for (int k = 0; k < n; ++k) {
        double s = k * h;
        double k1 = rhs(s, v), k2 = rhs(s + h / 2, v + h / 2 * k1), k3 = rhs(s + h / 2, v + h / 2 * k2),
               k4 = rhs(s + h, v + h * k3);
        v += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
      }
      EXPECT_NEAR(clt_variance_oracle(m, kappa, Q, t), v, 1e-7 * v);
    }
  }
}

TEST(CltOracle, Ordering) {
  ScalarModel m(1.0, 1.0, 1.0);
  EXPECT_EQ(clt_variance_oracle(m, 0.0, 0.0, 0.0), 0.0);
  EXPECT_GT(clt_variance_oracle(m, 1.0, 0.5, 1.0), clt_variance_oracle(m, 0.0, 0.5, 1.0));
}

TEST(Lyapunov, BoundsAndLimits) {
  ScalarModel m(20.0, 1.0, 1.0);
  for (double kappa : {0.0, 1.0}) {
    double v = lyapunov_exponent(m, kappa, 6);
    auto b = lyapunov_bounds(m, kappa, 6);
    EXPECT_GE(v, b.lower);
    EXPECT_LE(v, b.upper);
  }
  auto b0 = lyapunov_bounds(m, 0.0, 6);
  EXPECT_NEAR(b0.lower, -std::sqrt(401.0), 1e-12);
  EXPECT_NEAR(b0.upper, -std::sqrt(400.0 + 1.0 / 3.0), 1e-12);
  EXPECT_THROW(lyapunov_bounds(m, 0.0, 4), BoundNotApplicable);
  for (double kappa : {0.0, 1.0})
    EXPECT_NEAR(lyapunov_exponent(ScalarModel(1.0, 1.0, 1.0), kappa, 100000), -std::sqrt(2.0), 1e-3);
}
