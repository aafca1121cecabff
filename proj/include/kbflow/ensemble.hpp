#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "kbflow/kalman.hpp"
#include "kbflow/model.hpp"
#include "kbflow/random.hpp"
#include "kbflow/sde.hpp"

namespace kbflow {

enum class Variant { vanilla, deterministic, transport };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::vanilla: return "vanilla";
    case Variant::deterministic: return "deterministic";
    case Variant::transport: return "transport";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "vanilla" || s == "F1" || s == "venkf") return Variant::vanilla;
  if (s == "deterministic" || s == "F2" || s == "denkf") return Variant::deterministic;
  if (s == "transport" || s == "F3" || s == "dentf") return Variant::transport;
  throw Error("unknown variant: " + s);
}

// kappa of the unified covariance SDE; transport has no diffusion at all.
inline double kappa_of(Variant v) { return v == Variant::vanilla ? 1.0 : 0.0; }

struct Inflation {
  double xi = 0.0;
  Matrix T;  // empty means identity
  bool active() const { return xi > 0.0; }
  Matrix T_or_identity(int d) const { return T.size() ? T : Matrix::Identity(d, d); }
};

struct EnsembleState {
  double t = 0.0;
  Matrix particles;  // d x (N+1)
  Variant variant = Variant::vanilla;
  std::optional<Inflation> inflation;
  int N() const { return static_cast<int>(particles.cols()) - 1; }
};

struct SampleStats {
  Vector X_hat;
  Matrix P_hat;
  std::optional<Matrix> P_hat_h;
};

inline SampleStats sample_stats(const Matrix& particles) {
  if (particles.cols() < 2) throw Error("sample_stats: need at least two particles");
  const double N = static_cast<double>(particles.cols() - 1);
  SampleStats s;
  s.X_hat = particles.rowwise().mean();
  Matrix D = particles.colwise() - s.X_hat;
  s.P_hat = symmetrize(D * D.transpose() / N);
  return s;
}

// h maps the whole d x (N+1) particle matrix to the d_y x (N+1) matrix of
// observations.
template <class ObsEval>
SampleStats sample_stats(const Matrix& particles, ObsEval&& h) {
  SampleStats s = sample_stats(particles);
  const double N = static_cast<double>(particles.cols() - 1);
  Matrix hx = h(particles);
  Vector hhat = hx.rowwise().mean();
  Matrix D = particles.colwise() - s.X_hat;
  Matrix Dh = hx.colwise() - hhat;
  s.P_hat_h = D * Dh.transpose() / N;
  return s;
}

struct EnsembleStreams {
  NoiseStream signal;  // V^i
  NoiseStream obs;     // W^i
  EnsembleStreams() = default;
  EnsembleStreams(std::uint64_t seed, std::uint32_t trial, std::uint32_t level = 0)
      : signal(seed, trial, Channel::particle_signal, level), obs(seed, trial, Channel::particle_obs, level) {}
};

// Noise parameters the particle update needs besides the drift/sensor maps.
struct NoiseModel {
  Matrix R, R_sqrt, R1_sqrt, R1_inv;
  static NoiseModel from(const LinearGaussianModel& m) {
    return {m.R(), m.R_sqrt(), m.R1_sqrt(), m.R1_inv()};
  }
};

// One time step of the interacting particle system. a and h act on the whole
// particle matrix. F1/F2 take an Euler-Maruyama step; F3 advances its
// deterministic interaction drift with RK4 and adds the common gain times dY.
template <class DriftEval, class ObsEval>
class EnsembleCore {
 public:
  EnsembleCore(NoiseModel noise, DriftEval a, ObsEval h, Variant v, Matrix infl_gain = {})
      : nm_(std::move(noise)), a_(std::move(a)), h_(std::move(h)), v_(v), infl_(std::move(infl_gain)) {}

  Variant variant() const { return v_; }

  // Statistics of the last evaluated ensemble (start of the last step).
  const Vector& x_hat() const { return xhat_; }
  const Matrix& p_hat() const { return P_; }
  const Matrix& p_hat_h() const { return Ph_; }

  void compute_stats(const Matrix& X) {
    const double N = static_cast<double>(X.cols() - 1);
    xhat_ = X.rowwise().mean();
    D_ = X.colwise() - xhat_;
    hx_ = h_(X);
    hhat_ = hx_.rowwise().mean();
    Dh_.noalias() = hx_.colwise() - hhat_;
    P_.noalias() = D_ * D_.transpose();
    P_ /= N;
    P_ = 0.5 * (P_ + P_.transpose()).eval();
    Ph_.noalias() = D_ * Dh_.transpose();
    Ph_ /= N;
    K_ = Ph_;
    if (infl_.size()) K_ += infl_;
    K_ = (K_ * nm_.R1_inv).eval();
  }

  void step(Matrix& X, const Vector& dY, double dt, EnsembleStreams& streams) {
    if (v_ == Variant::transport) {
      transport_step(X, dY, dt);
      return;
    }
    compute_stats(X);
    const auto cols = X.cols();
    const double sdt = std::sqrt(dt);
    innov_.resize(hx_.rows(), cols);
    if (v_ == Variant::vanilla) {
      W_.resize(hx_.rows(), cols);
      streams.obs.fill_normal(W_.data(), static_cast<std::size_t>(W_.size()), sdt);
      innov_.noalias() = -nm_.R1_sqrt * W_;
      innov_ -= hx_ * dt;
    } else {
      innov_ = hx_.colwise() + hhat_;
      innov_ *= -0.5 * dt;
    }
    innov_.colwise() += dY;
    V_.resize(X.rows(), cols);
    streams.signal.fill_normal(V_.data(), static_cast<std::size_t>(V_.size()), sdt);
    Matrix ax = a_(X);
    X.noalias() += ax * dt;
    X.noalias() += K_ * innov_;
    X.noalias() += nm_.R_sqrt * V_;
  }

 private:
  Matrix transport_drift(const Matrix& X) {
    compute_stats(X);
    const bool full_rank = X.cols() - 1 >= X.rows();
    Matrix Pinv;
    if (full_rank) {
      Eigen::LDLT<Matrix> ldlt(P_);
      Pinv = ldlt.info() == Eigen::Success ? Matrix(ldlt.solve(Matrix::Identity(P_.rows(), P_.cols())))
                                           : pseudo_inverse(P_);
      if (!Pinv.allFinite()) Pinv = pseudo_inverse(P_);
    } else {
      Pinv = pseudo_inverse(P_);
    }
    Matrix f = a_(X);
    f.noalias() += 0.5 * nm_.R * Pinv * D_;
    Matrix mid = hx_.colwise() + hhat_;
    f.noalias() -= 0.5 * K_ * mid;
    return f;
  }

  void transport_step(Matrix& X, const Vector& dY, double dt) {
    Matrix k1 = transport_drift(X);
    Matrix K0 = K_;
    Vector xh0 = xhat_;
    Matrix P0 = P_, Ph0 = Ph_;
    Matrix k2 = transport_drift(X + 0.5 * dt * k1);
    Matrix k3 = transport_drift(X + 0.5 * dt * k2);
    Matrix k4 = transport_drift(X + dt * k3);
    X += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    X.colwise() += K0 * dY;
    // keep the statistics of the step's starting point visible
    K_ = K0;
    xhat_ = xh0;
    P_ = P0;
    Ph_ = Ph0;
  }

  NoiseModel nm_;
  DriftEval a_;
  ObsEval h_;
  Variant v_;
  Matrix infl_;
  Vector xhat_, hhat_;
  Matrix D_, hx_, Dh_, P_, Ph_, K_, innov_, W_, V_;
};

struct LinearDrift {
  const Matrix* A;
  Matrix operator()(const Matrix& X) const { return (*A) * X; }
};

struct LinearObs {
  const Matrix* H;
  Matrix operator()(const Matrix& X) const { return (*H) * X; }
};

using LinearCore = EnsembleCore<LinearDrift, LinearObs>;

// xi T, or zero when inflation is off.
inline Matrix inflation_matrix(const std::optional<Inflation>& inf, int d) {
  if (!inf || !inf->active()) return Matrix::Zero(d, d);
  return inf->xi * inf->T_or_identity(d);
}

inline Matrix inflation_gain(const LinearGaussianModel& m, const std::optional<Inflation>& inf) {
  if (!inf || !inf->active()) return {};
  return inf->xi * inf->T_or_identity(m.d()) * m.H().transpose();
}

inline LinearCore make_linear_core(const LinearGaussianModel& m, Variant v,
                                   const std::optional<Inflation>& inf = std::nullopt) {
  if (inf && inf->active() && v == Variant::transport)
    throw Error("inflation is defined for the vanilla and deterministic variants only");
  return LinearCore(NoiseModel::from(m), LinearDrift{&m.A()}, LinearObs{&m.H()}, v, inflation_gain(m, inf));
}

inline EnsembleState step_particles(const LinearGaussianModel& m, const EnsembleState& state, const Vector& dY,
                                    double dt, EnsembleStreams& streams) {
  auto core = make_linear_core(m, state.variant, state.inflation);
  EnsembleState next = state;
  core.step(next.particles, dY, dt, streams);
  next.t = state.t + dt;
  if (!next.particles.allFinite()) throw NonFinite("step_particles: particle left the reals", 1, next.t);
  return next;
}

// Heuristic nonlinear ensemble step. a and h act on the whole particle
// matrix; with a(X) = A X and h(X) = H X this is step_particles.
template <class DriftEval, class ObsEval>
EnsembleState nonlinear_step(DriftEval a, ObsEval h, const Matrix& R, const Matrix& R1, const EnsembleState& state,
                             const Vector& dY, double dt, EnsembleStreams& streams) {
  NoiseModel nm{R, symmetric_sqrt(R), symmetric_sqrt(R1),
                symmetrize(R1.llt().solve(Matrix::Identity(R1.rows(), R1.cols())))};
  EnsembleCore<DriftEval, ObsEval> core(std::move(nm), std::move(a), std::move(h), state.variant);
  EnsembleState next = state;
  core.step(next.particles, dY, dt, streams);
  next.t = state.t + dt;
  if (!next.particles.allFinite()) throw NonFinite("nonlinear_step: particle left the reals", 1, next.t);
  return next;
}

// Wraps a per-particle map x -> f(x) as a whole-ensemble evaluator.
template <class F>
auto columnwise(F f, int out_rows) {
  return [f = std::move(f), out_rows](const Matrix& X) {
    Matrix out(out_rows, X.cols());
    for (Eigen::Index i = 0; i < X.cols(); ++i) out.col(i) = f(Vector(X.col(i)));
    return out;
  };
}

// Allocation-free F1/F2 kernel for d = d_y = 1, used by long stationary
// runs. Consumes the particle streams in the same order as EnsembleCore.
class ScalarEnsemble {
 public:
  ScalarEnsemble(const LinearGaussianModel& m, Variant v, std::vector<double> particles,
                 const std::optional<Inflation>& inf = std::nullopt)
      : A_(m.A()(0, 0)),
        h_(m.H()(0, 0)),
        r_sqrt_(m.R_sqrt()(0, 0)),
        r1_sqrt_(m.R1_sqrt()(0, 0)),
        r1_inv_(m.R1_inv()(0, 0)),
        v_(v),
        x_(std::move(particles)) {
    if (m.d() != 1 || m.d_y() != 1) throw Error("ScalarEnsemble: scalar models only");
    if (v == Variant::transport) throw Error("ScalarEnsemble: transport variant not supported");
    if (x_.size() < 2) throw Error("ScalarEnsemble: need at least two particles");
    infl_ = inflation_matrix(inf, 1)(0, 0) * h_;
    w_.resize(x_.size());
    vn_.resize(x_.size());
    stats();
  }

  int N() const { return static_cast<int>(x_.size()) - 1; }
  double x_hat() const { return xbar_; }
  double p_hat() const { return p_; }
  const std::vector<double>& particles() const { return x_; }

  void step(double dY, double dt, EnsembleStreams& streams) {
    const std::size_t n = x_.size();
    const double sdt = std::sqrt(dt);
    const double K = (p_ * h_ + infl_) * r1_inv_;
    if (v_ == Variant::vanilla) streams.obs.fill_normal(w_.data(), n, sdt);
    streams.signal.fill_normal(vn_.data(), n, sdt);
    if (v_ == Variant::vanilla) {
      for (std::size_t i = 0; i < n; ++i)
        x_[i] += A_ * x_[i] * dt + K * (dY - (h_ * x_[i] * dt + r1_sqrt_ * w_[i])) + r_sqrt_ * vn_[i];
    } else {
      const double hb = h_ * xbar_;
      for (std::size_t i = 0; i < n; ++i)
        x_[i] += A_ * x_[i] * dt + K * (dY - 0.5 * (h_ * x_[i] + hb) * dt) + r_sqrt_ * vn_[i];
    }
    stats();
  }

  bool finite() const { return std::isfinite(p_) && std::isfinite(xbar_); }

 private:
  void stats() {
    double s = 0.0;
    for (double v : x_) s += v;
    xbar_ = s / static_cast<double>(x_.size());
    double q = 0.0;
    for (double v : x_) q += (v - xbar_) * (v - xbar_);
    p_ = q / static_cast<double>(x_.size() - 1);
  }

  double A_, h_, r_sqrt_, r1_sqrt_, r1_inv_, infl_ = 0.0;
  Variant v_;
  std::vector<double> x_, w_, vn_;
  double xbar_ = 0.0, p_ = 0.0;
};

// ---- initial ensembles ---------------------------------------------------

// (N+1) draws from Gaussian(m0, Q). With exact_moments the cloud is
// recoloured so its sample mean and P_hat equal m0 and Q exactly (N >= d).
inline Matrix initial_ensemble(const Vector& m0, const Matrix& Q, int N, NoiseStream& stream,
                               bool exact_moments = false) {
  const auto d = m0.size();
  Matrix Z = gaussian_increments(stream, d, N + 1, 1.0);
  if (!exact_moments) {
    Matrix X = symmetric_sqrt(Q) * Z;
    X.colwise() += m0;
    return X;
  }
  if (N < d) throw Error("exact-moment initial ensemble needs N >= d");
  Vector zbar = Z.rowwise().mean();
  Z.colwise() -= zbar;
  Matrix C = Z * Z.transpose() / static_cast<double>(N);
  Eigen::LLT<Matrix> llt(C);
  Matrix W = llt.matrixL().solve(Z);  // sample covariance of W is I
  Matrix X = symmetric_sqrt(Q) * W;
  X.colwise() += m0;
  return X;
}

// ---- trajectories ----------------------------------------------------------

struct Divergence {
  double t = 0.0;
  long step = 0;
  std::string variant;
  int N = 0;
  std::uint64_t seed = 0;
  std::uint32_t trial = 0;
};

struct TrajectoryRecord {
  std::string variant = "kalman";
  int N = 0;
  double xi = 0.0;
  double kappa = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> t;
  std::vector<Vector> X;
  std::vector<Vector> Z;
  std::vector<Matrix> P;
  std::vector<double> mu_closed_loop;
  std::optional<Divergence> diverged;

  bool is_ensemble() const { return N > 0; }
  std::size_t size() const { return t.size(); }
};

inline TrajectoryRecord to_record(const std::vector<KalmanState>& run, const LinearGaussianModel& m) {
  TrajectoryRecord rec;
  for (const auto& s : run) {
    rec.t.push_back(s.t);
    rec.X.push_back(s.X);
    rec.Z.push_back(s.Z);
    rec.P.push_back(s.P);
    rec.mu_closed_loop.push_back(log_norm(m.A() - s.P * m.S()));
  }
  return rec;
}

struct EnsembleRunOptions {
  std::uint64_t seed = 1;
  std::uint32_t trial = 0;
  std::uint32_t level = 0;
  std::optional<Vector> m0;  // initial ensemble mean, default 0
  std::optional<Matrix> Q;   // initial ensemble covariance, default identity
  std::optional<Matrix> initial_particles;
  bool exact_moments = false;
  std::optional<Inflation> inflation;
  TruthConfig truth;
  long record_every = 1;
};

// Observer signature: (step index k, time t, core after stats at t, particles).
template <class Observer>
std::optional<Divergence> run_enkf_observe(const LinearGaussianModel& m, Variant variant, int N,
                                           const TimeGrid& grid, const EnsembleRunOptions& opt,
                                           Observer&& observe, Matrix* final_particles = nullptr) {
  if (N < 1) throw Error("run_enkf: N must be at least 1");
  const int d = m.d();
  Vector m0 = opt.m0 ? *opt.m0 : Vector::Zero(d);
  Matrix Q = opt.Q ? *opt.Q : Matrix::Identity(d, d);
  Matrix X;
  if (opt.initial_particles) {
    X = *opt.initial_particles;
    if (X.rows() != d || X.cols() != N + 1) throw Error("run_enkf: initial particles have the wrong shape");
  } else {
    NoiseStream init(opt.seed, opt.trial, Channel::particle_init, opt.level);
    X = initial_ensemble(m0, Q, N, init, opt.exact_moments);
  }
  TruthSimulator truth(m, opt.seed, opt.trial, Q, opt.truth);
  EnsembleStreams streams(opt.seed, opt.trial, opt.level);
  auto core = make_linear_core(m, variant, opt.inflation);
  for (long k = 0; k <= grid.steps; ++k) {
    double t = grid.time(k);
    if (k == grid.steps) {
      core.compute_stats(X);
      observe(k, t, core, X, truth.state());
      break;
    }
    Vector truth_now = truth.state();
    Vector dy = truth.step(grid.dt);
    core.step(X, dy, grid.dt, streams);  // stats refer to X at time t
    observe(k, t, core, X, truth_now);
    if (!X.allFinite()) {
      if (final_particles) *final_particles = X;
      return Divergence{grid.time(k + 1), k + 1, to_string(variant), N, opt.seed, opt.trial};
    }
  }
  if (final_particles) *final_particles = X;
  return std::nullopt;
}

inline TrajectoryRecord run_enkf(const LinearGaussianModel& m, Variant variant, int N, const TimeGrid& grid,
                                 const EnsembleRunOptions& opt = {}) {
  TrajectoryRecord rec;
  rec.variant = to_string(variant);
  rec.N = N;
  rec.xi = opt.inflation ? opt.inflation->xi : 0.0;
  rec.kappa = variant == Variant::transport ? std::numeric_limits<double>::quiet_NaN() : kappa_of(variant);
  Matrix Tinf = inflation_matrix(opt.inflation, m.d());
  const long every = std::max<long>(1, opt.record_every);
  auto obs = [&](long k, double t, const LinearCore& core, const Matrix&, const Vector& truth) {
    if (k % every != 0 && k != grid.steps) return;
    rec.t.push_back(t);
    rec.X.push_back(core.x_hat());
    rec.Z.push_back(core.x_hat() - truth);
    rec.P.push_back(core.p_hat());
    rec.mu_closed_loop.push_back(log_norm(m.A() - (core.p_hat() + Tinf) * m.S()));
  };
  rec.diverged = run_enkf_observe(m, variant, N, grid, opt, obs);
  return rec;
}

// ---- law-level mean / covariance SDEs -------------------------------------

// Drift of the (possibly inflated) covariance SDE:
// Ricc(P) + kappa xi^2 T S T - (1 - kappa)(xi/2)(T S P + P S T).
inline Matrix inflated_ricc_drift(const LinearGaussianModel& m, const Matrix& P, double kappa, double xi,
                                  const Matrix& T) {
  Matrix out = ricc_drift(m, P);
  if (xi > 0.0) {
    Matrix tsp = T * m.S() * P;
    out += kappa * xi * xi * T * m.S() * T - (1.0 - kappa) * 0.5 * xi * (tsp + tsp.transpose());
  }
  return symmetrize(out);
}

inline Matrix sigma_kappa(const LinearGaussianModel& m, const Matrix& P, double kappa, double xi = 0.0,
                          const Matrix& T = {}) {
  Matrix G = (xi > 0.0 && T.size()) ? Matrix(P + xi * T) : P;
  return symmetrize(m.R() + kappa * G * m.S() * G);
}

struct LawLevelOptions {
  std::uint64_t seed = 1;
  std::uint32_t trial = 0;
  std::uint32_t level = 0;
  std::optional<SchemeKind> scheme;  // default: tamed for kappa = 1
  std::optional<Inflation> inflation;
  TruthConfig truth;
  long record_every = 1;
};

class LawLevelSimulator {
 public:
  LawLevelSimulator(const LinearGaussianModel& m, double kappa, int N, const Matrix& Q, const Vector& x0,
                    const LawLevelOptions& opt)
      : m_(&m),
        kappa_(kappa),
        N_(N),
        P_(project_psd(Q)),
        X_(x0),
        mstream_(opt.seed, opt.trial, Channel::law_matrix, opt.level),
        bstream_(opt.seed, opt.trial, Channel::law_mean, opt.level) {
    if (N < 1) throw Error("law_level_run: N must be at least 1");
    scheme_.kind = opt.scheme ? *opt.scheme
                              : (kappa > 0.0 ? SchemeKind::tamed_euler : SchemeKind::euler_maruyama);
    xi_ = opt.inflation ? opt.inflation->xi : 0.0;
    T_ = opt.inflation ? opt.inflation->T_or_identity(m.d()) : Matrix::Zero(m.d(), m.d());
    gain_r_ = m.H().transpose() * m.R1_inv();
    M_.resize(m.d(), m.d());
    B_.resize(m.d());
  }

  const Matrix& P() const { return P_; }
  const Vector& X() const { return X_; }
  SchemeKind scheme() const { return scheme_.kind; }

  void step(const Vector& dY, double dt) {
    const double sdt = std::sqrt(dt);
    Matrix G = P_ + xi_ * T_;
    Matrix sig = sigma_kappa(*m_, P_, kappa_, xi_, T_);
    Matrix sig_half = symmetric_sqrt(sig);
    Matrix p_half = symmetric_sqrt(P_);
    mstream_.fill_normal(M_.data(), static_cast<std::size_t>(M_.size()), sdt);
    bstream_.fill_normal(B_.data(), static_cast<std::size_t>(B_.size()), sdt);
    Matrix noise = p_half * M_ * sig_half;
    noise = (2.0 / std::sqrt(double(N_))) * symmetrize(noise);
    Matrix drift = inflated_ricc_drift(*m_, P_, kappa_, xi_, T_);
    Vector xdrift = (m_->A() - G * m_->S()) * X_;
    X_ = X_ + xdrift * dt + G * gain_r_ * dY + (1.0 / std::sqrt(double(N_) + 1.0)) * sig_half * B_;
    P_ = project_psd(P_ + scheme_.drift_step(drift, dt) + noise);
  }

 private:
  const LinearGaussianModel* m_;
  double kappa_;
  int N_;
  Matrix P_;
  Vector X_;
  NoiseStream mstream_, bstream_;
  Scheme scheme_;
  double xi_ = 0.0;
  Matrix T_, gain_r_, M_;
  Vector B_;
};

inline TrajectoryRecord law_level_run(const LinearGaussianModel& m, double kappa, int N, const Matrix& Q,
                                      const Vector& x0, const TimeGrid& grid, const LawLevelOptions& opt = {}) {
  TrajectoryRecord rec;
  rec.variant = kappa > 0.0 ? "law_vanilla" : "law_deterministic";
  rec.N = N;
  rec.kappa = kappa;
  rec.xi = opt.inflation ? opt.inflation->xi : 0.0;
  Matrix Tinf = inflation_matrix(opt.inflation, m.d());
  LawLevelSimulator sim(m, kappa, N, Q, x0, opt);
  TruthSimulator truth(m, opt.seed, opt.trial, Q, opt.truth);
  const long every = std::max<long>(1, opt.record_every);
  auto record = [&](long k) {
    if (k % every != 0 && k != grid.steps) return;
    rec.t.push_back(grid.time(k));
    rec.X.push_back(sim.X());
    rec.Z.push_back(sim.X() - truth.state());
    rec.P.push_back(sim.P());
    rec.mu_closed_loop.push_back(log_norm(m.A() - (sim.P() + Tinf) * m.S()));
  };
  record(0);
  for (long k = 0; k < grid.steps; ++k) {
    Vector dy = truth.step(grid.dt);
    sim.step(dy, grid.dt);
    if (!sim.P().allFinite() || !sim.X().allFinite()) {
      rec.diverged = Divergence{grid.time(k + 1), k + 1, rec.variant, N, opt.seed, opt.trial};
      break;
    }
    record(k + 1);
  }
  return rec;
}

// Deterministic (N -> infinity) limit of the inflated covariance flow.
inline std::vector<RiccatiState> inflated_riccati_flow(const LinearGaussianModel& m, const Matrix& Q, double kappa,
                                                       double xi, const Matrix& T, const TimeGrid& grid,
                                                       OdeOptions opt = {}) {
  auto rhs = [&](double, const Matrix& P) { return inflated_ricc_drift(m, P, kappa, xi, T); };
  auto ode = make_rk4(rhs, clamp_covariance, opt);
  std::vector<RiccatiState> out;
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

// ---- stochastic semigroups --------------------------------------------------

struct StochasticSemigroup {
  double s = 0.0;
  double t = 0.0;
  Matrix E_hat;                    // scaled by exp(log_scale)
  double log_scale = 0.0;          // E_hat_true = exp(log_scale) * E_hat
  double log_norm_integral = 0.0;  // int mu(A - P S) du
  double trace_integral = 0.0;     // int Tr(A - P S) du
  double log_det = 0.0;            // log det of the true E_hat
  double lyapunov = 0.0;           // (1/(t-s)) log ||E_hat||

  double det() const { return std::exp(log_det); }
  Matrix value() const { return std::exp(log_scale) * E_hat; }
};

// Accumulates E_hat along a covariance path, one exact exponential per step
// with the closed-loop matrix frozen at the left end point.
class SemigroupAccumulator {
 public:
  SemigroupAccumulator(const LinearGaussianModel& m, double s, const Matrix& shift = {})
      : m_(&m), shift_(shift.size() ? shift : Matrix::Zero(m.d(), m.d())) {
    g_.s = g_.t = s;
    g_.E_hat = Matrix::Identity(m.d(), m.d());
  }

  void push(const Matrix& P, double dt) {
    Matrix F = m_->A() - shift_ - P * m_->S();
    Matrix step = F.rows() == 1 ? Matrix::Constant(1, 1, std::exp(F(0, 0) * dt)) : expm(F * dt);
    g_.E_hat = step * g_.E_hat;
    g_.trace_integral += F.trace() * dt;
    g_.log_norm_integral += log_norm(F) * dt;
    g_.t += dt;
    double n = g_.E_hat.cwiseAbs().maxCoeff();
    if (n > 1e100 || (n < 1e-100 && n > 0.0)) {
      g_.E_hat /= n;
      g_.log_scale += std::log(n);
    }
  }

  StochasticSemigroup result() const {
    StochasticSemigroup out = g_;
    const double d = static_cast<double>(g_.E_hat.rows());
    double det = g_.E_hat.determinant();
    out.log_det = std::log(std::abs(det)) + d * g_.log_scale;
    double span = g_.t - g_.s;
    out.lyapunov = span > 0.0 ? (std::log(operator_norm(g_.E_hat)) + g_.log_scale) / span : 0.0;
    return out;
  }

 private:
  const LinearGaussianModel* m_;
  Matrix shift_;
  StochasticSemigroup g_;
};

// E_hat_{s,t} along a recorded covariance path sampled with spacing dt
// (path[k] at time k * dt); s and t are path indices.
inline StochasticSemigroup stochastic_semigroup(const LinearGaussianModel& m, const std::vector<Matrix>& path,
                                                double dt, std::size_t s_index, std::size_t t_index,
                                                const std::optional<Inflation>& inflation = std::nullopt) {
  if (t_index < s_index || t_index >= path.size()) throw Error("stochastic_semigroup: bad index range");
  Matrix shift = inflation && inflation->active()
                     ? Matrix(inflation->xi * inflation->T_or_identity(m.d()) * m.S())
                     : Matrix::Zero(m.d(), m.d());
  SemigroupAccumulator acc(m, static_cast<double>(s_index) * dt, shift);
  for (std::size_t k = s_index; k < t_index; ++k) acc.push(path[k], dt);
  return acc.result();
}

// Decay rate bound sqrt(Tr(R_n S_n)) for E[det(E_hat_t)^n]^{1/n}.
inline double liouville_bound(const LinearGaussianModel& m, int n, int N, double kappa) {
  if (n < 1 || N < 1) throw Error("liouville_bound: need n >= 1 and N >= 1");
  double c = (2.0 * n + m.d() + 1.0) / static_cast<double>(N);
  if (c >= 1.0) throw BoundNotApplicable("liouville_bound: (2n+d+1)/N >= 1");
  Matrix Rn = m.R() * (1.0 - c);
  Matrix Sn = m.S() * (1.0 - kappa * c);
  double tr = (Rn * Sn).trace();
  if (tr < 0.0) throw BoundNotApplicable("liouville_bound: negative trace");
  return std::sqrt(tr);
}

}  // namespace kbflow
