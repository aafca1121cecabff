#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "kbflow/kalman.hpp"
#include "kbflow/stats.hpp"
#include "test_util.hpp"

using namespace kbflow;
using kbflow::test::random_model;
using kbflow::test::random_psd;
using kbflow::test::scalar;

TEST(RiccDrift, Values) {
  EXPECT_NEAR(ricc_drift(scalar(0.0, 1.0, 1.0), Matrix::Constant(1, 1, 1.0))(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(ricc_drift(scalar(20.0, 1.0, 1.0), Matrix::Zero(1, 1))(0, 0), 1.0, 1e-15);
  std::mt19937_64 rng(2);
  auto m = random_model(2, 2, rng);
  Matrix P = random_psd(2, rng);
  Matrix ref(2, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double v = m.R()(i, j);
      for (int k = 0; k < 2; ++k) v += m.A()(i, k) * P(k, j) + P(i, k) * m.A()(j, k);
      for (int k = 0; k < 2; ++k)
        for (int l = 0; l < 2; ++l) v -= P(i, k) * m.S()(k, l) * P(l, j);
      ref(i, j) = v;
    }
  EXPECT_LT((ricc_drift(m, P) - ref).norm(), 1e-12 * ref.norm());
}

TEST(RiccatiFlow, FixedPointAndTanh) {
  auto m = scalar(0.0, 1.0, 1.0);
  auto grid = TimeGrid::over(0.0, 2.0, 0.5);
  for (const auto& s : riccati_flow(m, Matrix::Constant(1, 1, 1.0), grid)) EXPECT_NEAR(s.P(0, 0), 1.0, 1e-12);
  auto flow = riccati_flow(m, Matrix::Zero(1, 1), grid);
  for (const auto& s : flow) EXPECT_NEAR(s.P(0, 0), std::tanh(s.t), 1e-7);
}

TEST(RiccatiFlow, StiffScalarReachesRoot) {
  auto m = scalar(20.0, 1.0, 1.0);
  EXPECT_NEAR(riccati_at(m, Matrix::Zero(1, 1), 1.0)(0, 0), 20.0 + std::sqrt(401.0), 1e-8);
}

TEST(RiccatiFlow, MonotoneInInitialCondition) {
  std::mt19937_64 rng(21);
  for (int k = 0; k < 20; ++k) {
    auto m = random_model(2, 1, rng);
    Matrix Q1 = random_psd(2, rng);
    Matrix Q2 = Q1 + random_psd(2, rng);
    Matrix P1 = riccati_at(m, Q1, 0.8), P2 = riccati_at(m, Q2, 0.8);
    EXPECT_GE(min_eigenvalue(P2 - P1), -1e-8);
  }
}

TEST(RiccatiFlow, ExponentialStabilityOfDifferences) {
  std::mt19937_64 rng(8);
  auto m = random_model(2, 2, rng);
  Matrix Q1 = random_psd(2, rng), Q2 = random_psd(2, rng);
  std::vector<double> t, y;
  for (double s = 1.0; s <= 4.0; s += 0.5) {
    t.push_back(s);
    y.push_back(std::log((riccati_at(m, Q1, s) - riccati_at(m, Q2, s)).norm()));
  }
  EXPECT_LT(slope_fit(t, y).slope, 0.0);
}

TEST(Semigroup, IdentityAtEqualTimes) {
  std::mt19937_64 rng(1);
  auto m = random_model(2, 1, rng);
  EXPECT_LT((semigroup_E(m, Matrix::Identity(2, 2), 0.3, 0.3).E - Matrix::Identity(2, 2)).norm(), 1e-15);
}

TEST(Semigroup, ScalarRateAtEquilibrium) {
  for (double A : {0.0, 1.0, 20.0}) {
    auto m = scalar(A, 1.0, 1.0);
    Matrix Pinf = Matrix::Constant(1, 1, A + std::sqrt(A * A + 1.0));
    for (double t : {0.1, 1.0}) {
      double E = semigroup_E(m, Pinf, 0.0, t).E(0, 0);
      EXPECT_NEAR(E, std::exp(-t * std::sqrt(A * A + 1.0)), 1e-8);
    }
  }
}

TEST(Semigroup, Cocycle) {
  std::mt19937_64 rng(12);
  auto m = random_model(2, 2, rng);
  Matrix Q = random_psd(2, rng);
  Matrix E02 = semigroup_E(m, Q, 0.0, 2.0).E;
  Matrix E01 = semigroup_E(m, Q, 0.0, 1.0).E;
  Matrix E12 = semigroup_E(m, Q, 1.0, 2.0).E;
  EXPECT_LT((E02 - E12 * E01).norm(), 1e-7 * std::max(1.0, E02.norm()));
}

TEST(Semigroup, DeterministicLiouville) {
  std::mt19937_64 rng(14);
  auto m = random_model(2, 1, rng);
  Matrix Q = random_psd(2, rng);
  const double t = 1.5;
  auto flow = riccati_flow(m, Q, TimeGrid::over(0.0, t, 1e-4));
  double integral = 0.0;
  for (std::size_t k = 0; k + 1 < flow.size(); ++k) {
    double a = (m.A() - flow[k].P * m.S()).trace(), b = (m.A() - flow[k + 1].P * m.S()).trace();
    integral += 0.5 * (a + b) * (flow[k + 1].t - flow[k].t);
  }
  EXPECT_NEAR(semigroup_E(m, Q, 0.0, t).E.determinant(), std::exp(integral), 1e-7 * std::exp(integral));
}

TEST(Sandwich, ScalarAndRandom) {
  auto rep = check_riccati_sandwich(scalar(0.0, 1.0, 1.0), Matrix::Constant(1, 1, 5.0), 1.0, 2.0);
  EXPECT_TRUE(rep.holds);
  std::mt19937_64 rng(33);
  int ok = 0;
  for (int k = 0; k < 100; ++k) {
    auto m = random_model(2, 2, rng, 0.5);
    ok += check_riccati_sandwich(m, random_psd(2, rng), 0.5, 1.0).holds;
  }
  EXPECT_EQ(ok, 100);
}

TEST(Sandwich, EqualityWhenStartingAtEquilibriumWithRSEqualPinf) {
  // A = 0, R = S = 1 gives P_inf = 1 = R
  auto m = scalar(0.0, 1.0, 1.0);
  auto rep = check_riccati_sandwich(m, Matrix::Constant(1, 1, 1.0), 1.0, 1.5);
  EXPECT_NEAR(rep.qhi_margin, 0.0, 1e-8);
}

TEST(KalmanRun, NoiseFreeExactInitialisation) {
  Matrix Z = Matrix::Zero(1, 1);
  LinearGaussianModel m(Z, Matrix::Identity(1, 1), Z, Matrix::Constant(1, 1, 1e-8));
  TruthConfig cfg;
  cfg.m0 = Vector::Constant(1, 0.7);
  cfg.P0 = Z;
  auto run = kalman_run(m, Vector::Constant(1, 0.7), Z, 4, TimeGrid::over(0.0, 1.0, 1e-3), cfg);
  double worst = 0.0;
  for (const auto& s : run) worst = std::max(worst, std::abs(s.Z(0)));
  EXPECT_LT(worst, 1e-3);  // only the 1e-4 observation noise enters
}

TEST(KalmanRun, StationaryErrorVarianceMatchesAre) {
  auto m = scalar(-1.0, 1.0, 1.0);
  const double Pinf = -1.0 + std::sqrt(2.0);
  auto run = kalman_run(m, Vector::Zero(1), Matrix::Constant(1, 1, Pinf), 42, TimeGrid::over(0.0, 2000.0, 1e-2));
  std::vector<double> z;
  for (std::size_t k = run.size() / 2; k < run.size(); k += 100) z.push_back(run[k].Z(0));
  double v = variance_of(z);
  // records one time unit apart are nearly independent (decay rate sqrt(2))
  double se = v * std::sqrt(2.0 / z.size()) * 1.5;
  EXPECT_NEAR(v, Pinf, 3.0 * se);
}

TEST(KalmanRun, MeanErrorDecays) {
  auto m = scalar(1.0, 1.0, 1.0);
  TruthConfig cfg;
  cfg.m0 = Vector::Constant(1, 0.0);
  std::vector<double> z;
  const auto grid = TimeGrid::over(0.0, 2.0, 1e-2);
  for (std::uint32_t trial = 0; trial < 10000; ++trial) {
    auto run = kalman_run(m, Vector::Constant(1, 3.0), Matrix::Identity(1, 1), 5, grid, cfg, trial);
    z.push_back(run.back().Z(0));
  }
  auto ci = mean_ci(z, 0.99);
  // E[Z_t] = E_t(Q) z0 with z0 = 3
  double Et = semigroup_E(m, Matrix::Identity(1, 1), 0.0, 2.0).E(0, 0);
  EXPECT_NEAR(ci.estimate, 3.0 * Et, 4.0 * ci.se + 0.02);
}

TEST(KalmanRun, DeterministicForFixedSeed) {
  std::mt19937_64 rng(6);
  auto m = random_model(2, 1, rng);
  auto grid = TimeGrid::over(0.0, 0.5, 1e-3);
  auto a = kalman_run(m, Vector::Zero(2), Matrix::Identity(2, 2), 99, grid);
  auto b = kalman_run(m, Vector::Zero(2), Matrix::Identity(2, 2), 99, grid);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].X, b[k].X);
    EXPECT_EQ(a[k].Z, b[k].Z);
  }
}
