#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "kbflow/model.hpp"
#include "kbflow/ode.hpp"
#include "kbflow/random.hpp"
#include "kbflow/sde.hpp"

namespace kbflow {

inline Matrix clamp_covariance(const Matrix& P) { return project_psd(symmetrize(P)); }

// Deterministic Riccati flow P' = Ricc(P), sampled on every grid point.
inline std::vector<RiccatiState> riccati_flow(const LinearGaussianModel& m, const Matrix& Q,
                                              const TimeGrid& grid, OdeOptions opt = {}) {
  if (min_eigenvalue(Q) < -1e-10 * std::max(1.0, sym_norm(Q))) throw NotPSD("riccati_flow: Q not PSD");
  auto rhs = [&m](double, const Matrix& P) { return ricc_drift(m, P); };
  auto ode = make_rk4(rhs, clamp_covariance, opt);
  std::vector<RiccatiState> out;
  out.reserve(static_cast<std::size_t>(grid.steps) + 1);
  Matrix P = clamp_covariance(Q);
  double t = grid.t0;
  out.push_back({t, P});
  for (long k = 1; k <= grid.steps; ++k) {
    ode.advance(t, P, grid.time(k));
    t = grid.time(k);
    out.push_back({t, P});
  }
  return out;
}

// phi_t(Q) at a single horizon.
inline Matrix riccati_at(const LinearGaussianModel& m, const Matrix& Q, double t, OdeOptions opt = {}) {
  auto rhs = [&m](double, const Matrix& P) { return ricc_drift(m, P); };
  auto ode = make_rk4(rhs, clamp_covariance, opt);
  Matrix P = clamp_covariance(Q);
  double s = 0.0;
  ode.advance(s, P, t);
  return P;
}

struct SemigroupMatrix {
  double s = 0.0;
  double t = 0.0;
  Matrix E;
};

// E_{s,t}(Q): transition matrix of A - phi_u(Q) S over [s, t].
inline SemigroupMatrix semigroup_E(const LinearGaussianModel& m, const Matrix& Q, double s, double t,
                                   OdeOptions opt = {}) {
  if (t < s) throw Error("semigroup_E: need s <= t");
  const int d = m.d();
  Matrix Ps = riccati_at(m, Q, s, opt);
  if (t == s) return {s, t, Matrix::Identity(d, d)};
  Matrix Y(d, 2 * d);
  Y.leftCols(d) = Ps;
  Y.rightCols(d) = Matrix::Identity(d, d);
  auto rhs = [&m, d](double, const Matrix& y) {
    Matrix out(d, 2 * d);
    Matrix P = y.leftCols(d);
    out.leftCols(d) = ricc_drift(m, P);
    out.rightCols(d) = (m.A() - P * m.S()) * y.rightCols(d);
    return out;
  };
  auto post = [d](const Matrix& y) {
    Matrix out = y;
    out.leftCols(d) = clamp_covariance(y.leftCols(d));
    return out;
  };
  auto ode = make_rk4(rhs, post, opt);
  double u = s;
  ode.advance(u, Y, t);
  return {s, t, Y.rightCols(d)};
}

struct SandwichReport {
  bool holds = false;
  double lower_margin = 0.0;  // min eig(phi_t - lower)
  double upper_margin = 0.0;  // min eig(upper - phi_t)
  double qhi_margin = 0.0;    // min eig(P_inf + e^{Ft}(Q - P_inf)e^{F't} - phi_t)
  Matrix lower, upper, qhi, phi;
};

inline SandwichReport check_riccati_sandwich(const LinearGaussianModel& m, const Matrix& Q, double tau,
                                             double t) {
  if (!(tau > 0.0) || t < tau) throw Error("check_riccati_sandwich: need t >= tau > 0");
  GramianSet g = gramians(m, tau);
  SandwichReport rep;
  rep.lower = symmetrize((g.O_tau_of_C + g.C_tau.inverse()).inverse());
  rep.upper = symmetrize(g.O_tau.inverse() + g.C_tau_of_O);
  rep.phi = riccati_at(m, Q, t);
  Matrix Pinf = solve_are(m).P;
  Matrix e = expm((m.A() - Pinf * m.S()) * t);
  rep.qhi = symmetrize(Pinf + e * (Q - Pinf) * e.transpose());
  rep.lower_margin = min_eigenvalue(rep.phi - rep.lower);
  rep.upper_margin = min_eigenvalue(rep.upper - rep.phi);
  rep.qhi_margin = min_eigenvalue(rep.qhi - rep.phi);
  rep.holds = rep.lower_margin >= -1e-8 && rep.upper_margin >= -1e-8 && rep.qhi_margin >= -1e-8;
  return rep;
}

// ---- truth and observations ---------------------------------------------

struct TruthConfig {
  std::optional<Vector> m0;  // default 0
  std::optional<Matrix> P0;  // default: the filter's initial covariance
  bool detached = false;     // signal pinned at 0, dY = R1^{1/2} dW
};

// Signal X_t and observation increments dY_t, Euler-Maruyama, generated step
// by step from (seed, trial). Every consumer built from the same identity
// sees bitwise identical increments.
class TruthSimulator {
 public:
  TruthSimulator(const LinearGaussianModel& m, std::uint64_t seed, std::uint32_t trial,
                 const Matrix& default_P0, const TruthConfig& cfg = {})
      : m_(&m),
        detached_(cfg.detached),
        v_(seed, trial, Channel::truth_signal),
        w_(seed, trial, Channel::truth_obs),
        x_(Vector::Zero(m.d())),
        dv_(m.d()),
        dw_(m.d_y()) {
    if (!detached_) {
      NoiseStream init(seed, trial, Channel::truth_init);
      Vector mean = cfg.m0 ? *cfg.m0 : Vector::Zero(m.d());
      Matrix cov = cfg.P0 ? *cfg.P0 : default_P0;
      x_ = mean + symmetric_sqrt(cov) * gaussian_vector(init, m.d());
    }
  }

  const Vector& state() const { return x_; }

  // Returns dY over [t, t+dt] and advances the signal.
  Vector step(double dt) {
    const double sdt = std::sqrt(dt);
    w_.fill_normal(dw_.data(), dw_.size(), sdt);
    Vector dy = m_->R1_sqrt() * dw_;
    if (!detached_) {
      v_.fill_normal(dv_.data(), dv_.size(), sdt);
      dy.noalias() += m_->H() * x_ * dt;
      x_ = x_ + m_->A() * x_ * dt + m_->R_sqrt() * dv_;
    }
    return dy;
  }

 private:
  const LinearGaussianModel* m_;
  bool detached_;
  NoiseStream v_, w_;
  Vector x_, dv_, dw_;
};

struct ObservationPath {
  std::vector<Vector> truth;  // steps + 1 entries
  std::vector<Vector> dY;     // steps entries
};

inline ObservationPath generate_observations(const LinearGaussianModel& m, const TimeGrid& grid,
                                             std::uint64_t seed, std::uint32_t trial,
                                             const Matrix& default_P0, const TruthConfig& cfg = {}) {
  TruthSimulator sim(m, seed, trial, default_P0, cfg);
  ObservationPath out;
  out.truth.push_back(sim.state());
  for (long k = 0; k < grid.steps; ++k) {
    out.dY.push_back(sim.step(grid.dt));
    out.truth.push_back(sim.state());
  }
  return out;
}

struct KalmanState {
  double t = 0.0;
  Vector X;
  Matrix P;
  Vector Z;  // X - truth
};

// Exact Kalman-Bucy filter co-simulated with its own truth. The mean uses
// Euler-Maruyama against dY; P follows the adaptive Riccati sub-flow.
inline std::vector<KalmanState> kalman_run(const LinearGaussianModel& m, const Vector& x0, const Matrix& Q,
                                           std::uint64_t truth_seed, const TimeGrid& grid,
                                           const TruthConfig& cfg = {}, std::uint32_t trial = 0) {
  TruthSimulator sim(m, truth_seed, trial, Q, cfg);
  auto rhs = [&m](double, const Matrix& P) { return ricc_drift(m, P); };
  auto ode = make_rk4(rhs, clamp_covariance, OdeOptions{});
  std::vector<KalmanState> out;
  out.reserve(static_cast<std::size_t>(grid.steps) + 1);
  Vector X = x0;
  Matrix P = clamp_covariance(Q);
  double t = grid.t0;
  out.push_back({t, X, P, X - sim.state()});
  const Matrix gain_r = m.H().transpose() * m.R1_inv();
  for (long k = 0; k < grid.steps; ++k) {
    Vector dy = sim.step(grid.dt);
    Matrix K = P * gain_r;
    X = X + m.A() * X * grid.dt + K * (dy - m.H() * X * grid.dt);
    ode.advance(t, P, grid.time(k + 1));
    t = grid.time(k + 1);
    if (!X.allFinite() || !P.allFinite()) throw NonFinite("kalman_run: filter state", k + 1, t);
    out.push_back({t, X, P, X - sim.state()});
  }
  return out;
}

}  // namespace kbflow
