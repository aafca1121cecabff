#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbflow/errors.hpp"
#include "kbflow/linalg.hpp"
#include "kbflow/ode.hpp"

namespace kbflow {

struct RiccatiState {
  double t = 0.0;
  Matrix P;
};

// Linear-Gaussian signal/sensor model. S = H' R1^{-1} H is derived on
// construction and never read from input.
class LinearGaussianModel {
 public:
  LinearGaussianModel() = default;

  LinearGaussianModel(Matrix A, Matrix H, Matrix R, Matrix R1)
      : A_(std::move(A)), H_(std::move(H)), R_(std::move(R)), R1_(std::move(R1)) {
    validate();
    R1_inv_ = R1_.llt().solve(Matrix::Identity(d_y(), d_y()));
    R1_inv_ = symmetrize(R1_inv_);
    S_ = symmetrize(H_.transpose() * R1_inv_ * H_);
    R_sqrt_ = symmetric_sqrt(R_);
    R1_sqrt_ = symmetric_sqrt(R1_);
  }

  int d() const { return static_cast<int>(A_.rows()); }
  int d_y() const { return static_cast<int>(H_.rows()); }
  const Matrix& A() const { return A_; }
  const Matrix& H() const { return H_; }
  const Matrix& R() const { return R_; }
  const Matrix& R1() const { return R1_; }
  const Matrix& S() const { return S_; }
  const Matrix& R1_inv() const { return R1_inv_; }
  const Matrix& R_sqrt() const { return R_sqrt_; }
  const Matrix& R1_sqrt() const { return R1_sqrt_; }

 private:
  void validate() const {
    const auto d = A_.rows();
    if (d < 1 || A_.cols() != d) throw InvalidModel("A must be square with d >= 1");
    if (H_.rows() < 1 || H_.cols() != d) throw InvalidModel("H must be d_y x d");
    if (R_.rows() != d || R_.cols() != d) throw InvalidModel("R must be d x d");
    if (R1_.rows() != H_.rows() || R1_.cols() != H_.rows())
      throw InvalidModel("R1 must be d_y x d_y");
    if (!A_.allFinite() || !H_.allFinite() || !R_.allFinite() || !R1_.allFinite())
      throw InvalidModel("non-finite model entry");
    double rs = std::max(1.0, R_.norm());
    if ((R_ - R_.transpose()).norm() > 1e-12 * rs) throw InvalidModel("R not symmetric");
    if (min_eigenvalue(R_) < -1e-10 * rs) throw InvalidModel("R not PSD");
    double r1s = std::max(1.0, R1_.norm());
    if ((R1_ - R1_.transpose()).norm() > 1e-12 * r1s) throw InvalidModel("R1 not symmetric");
    if (min_eigenvalue(R1_) <= 1e-12 * r1s) throw InvalidModel("R1 not positive definite");
  }

  Matrix A_, H_, R_, R1_, S_, R1_inv_, R_sqrt_, R1_sqrt_;
};

struct ScalarModel {
  double A = 0.0;
  double R = 1.0;
  double S = 1.0;

  ScalarModel() = default;
  ScalarModel(double a, double r, double s) : A(a), R(r), S(s) {
    if (!(R > 0.0) || !(S > 0.0)) throw InvalidModel("scalar model needs R > 0 and S > 0");
  }

  LinearGaussianModel to_linear() const {
    return LinearGaussianModel(Matrix::Constant(1, 1, A), Matrix::Constant(1, 1, std::sqrt(S)),
                               Matrix::Constant(1, 1, R), Matrix::Identity(1, 1));
  }
};

inline Matrix ricc_drift(const LinearGaussianModel& m, const Matrix& P) {
  Matrix ap = m.A() * P;
  return symmetrize(ap + ap.transpose() - P * m.S() * P + m.R());
}

// [M, A M, ..., A^{d-1} M] side by side.
inline Matrix krylov_block(const Matrix& A, const Matrix& M) {
  const auto d = A.rows();
  Matrix out(d, M.cols() * d);
  Matrix cur = M;
  for (Eigen::Index k = 0; k < d; ++k) {
    out.middleCols(k * M.cols(), M.cols()) = cur;
    cur = A * cur;
  }
  return out;
}

inline bool check_controllability(const LinearGaussianModel& m, double rank_tol = 1e-10) {
  return numerical_rank(krylov_block(m.A(), m.R_sqrt()), rank_tol) == m.d();
}

inline bool check_observability(const LinearGaussianModel& m, double rank_tol = 1e-10) {
  // stacked [H; HA; ...] has the rank of its transpose [H', A'H', ...]
  return numerical_rank(krylov_block(m.A().transpose(), m.H().transpose()), rank_tol) == m.d();
}

struct GramianSet {
  double tau = 0.0;
  Matrix O_tau, C_tau, C_tau_of_O, O_tau_of_C;
  int intervals = 0;
};

struct QuadratureResult {
  Matrix value;
  int intervals = 0;
};

// Composite Simpson on a uniform grid, doubling the interval count until the
// relative Frobenius change drops below rtol.
template <class F>
QuadratureResult simpson_doubling(F&& f, double a, double b, double rtol, int n_min = 8,
                                  int max_doublings = 22) {
  int n = 2;
  double h = (b - a) / n;
  Matrix ends = f(a) + f(b);
  Matrix even = Matrix::Zero(ends.rows(), ends.cols());
  Matrix odd = f(a + h);
  Matrix prev = (h / 3.0) * (ends + 4.0 * odd);
  for (int k = 0; k < max_doublings; ++k) {
    even += odd;
    n *= 2;
    h = (b - a) / n;
    odd.setZero();
    for (int i = 1; i < n; i += 2) odd += f(a + i * h);
    Matrix cur = (h / 3.0) * (ends + 4.0 * odd + 2.0 * even);
    double scale = std::max(cur.norm(), 1e-300);
    if (n >= n_min && (cur - prev).norm() <= rtol * scale) return {cur, n};
    prev = std::move(cur);
  }
  return {prev, n};
}

namespace detail {

// Van Loan: expm([[X, Q], [0, Y]] t) has upper-right block
// int_0^t e^{X(t-u)} Q e^{Y u} du.
inline Matrix van_loan_block(const Matrix& X, const Matrix& Q, const Matrix& Y, double t) {
  const auto d = X.rows();
  Matrix M = Matrix::Zero(2 * d, 2 * d);
  M.topLeftCorner(d, d) = X;
  M.topRightCorner(d, d) = Q;
  M.bottomRightCorner(d, d) = Y;
  Matrix F = expm(M * t);
  Matrix F11 = F.topLeftCorner(d, d);
  return symmetrize(F11.partialPivLu().solve(F.topRightCorner(d, d)));
}

}  // namespace detail

// int_0^t e^{-A's} S e^{-As} ds
inline Matrix observability_gramian_closed(const LinearGaussianModel& m, double t) {
  if (t == 0.0) return Matrix::Zero(m.d(), m.d());
  return detail::van_loan_block(m.A().transpose(), m.S(), -m.A(), t);
}

// int_0^t e^{As} R e^{A's} ds
inline Matrix controllability_gramian_closed(const LinearGaussianModel& m, double t) {
  if (t == 0.0) return Matrix::Zero(m.d(), m.d());
  return detail::van_loan_block(-m.A(), m.R(), m.A().transpose(), t);
}

inline GramianSet gramians(const LinearGaussianModel& m, double tau, double rel_tol = 1e-8,
                           int min_intervals = 8) {
  if (!(tau > 0.0)) throw Error("gramians: tau must be positive");
  const Matrix& A = m.A();
  GramianSet g;
  g.tau = tau;

  auto o_int = [&](double s) -> Matrix {
    Matrix e = expm(-A * s);
    return e.transpose() * m.S() * e;
  };
  auto c_int = [&](double s) -> Matrix {
    Matrix e = expm(A * s);
    return e * m.R() * e.transpose();
  };
  auto ro = simpson_doubling(o_int, 0.0, tau, rel_tol, min_intervals);
  auto rc = simpson_doubling(c_int, 0.0, tau, rel_tol, min_intervals);
  g.O_tau = symmetrize(ro.value);
  g.C_tau = symmetrize(rc.value);
  if (condition_number(g.O_tau) > 1e12)
    throw SingularGramian("observability Gramian condition number above 1e12");
  if (condition_number(g.C_tau) > 1e12)
    throw SingularGramian("controllability Gramian condition number above 1e12");

  auto co_int = [&](double s) -> Matrix {
    Matrix Os = observability_gramian_closed(m, s);
    Matrix e = expm(-A * (tau - s));
    return e.transpose() * Os * m.R() * Os * e;
  };
  auto oc_int = [&](double s) -> Matrix {
    Matrix Cs = controllability_gramian_closed(m, s);
    Matrix e = expm(A * (tau - s));
    return e * Cs * m.S() * Cs * e.transpose();
  };
  auto rco = simpson_doubling(co_int, 0.0, tau, rel_tol, min_intervals);
  auto roc = simpson_doubling(oc_int, 0.0, tau, rel_tol, min_intervals);
  Matrix Oinv = g.O_tau.inverse();
  Matrix Cinv = g.C_tau.inverse();
  g.C_tau_of_O = symmetrize(Oinv * rco.value * Oinv);
  g.O_tau_of_C = symmetrize(Cinv * roc.value * Cinv);
  g.intervals = std::max({ro.intervals, rc.intervals, rco.intervals, roc.intervals});
  return g;
}

inline double ricc_residual(const LinearGaussianModel& m, const Matrix& P) {
  return ricc_drift(m, P).norm();
}

struct AreOptions {
  double ode_residual = 1e-4;  // hand over to Newton below this relative residual
  double max_ode_time = 1e3;
  int max_newton = 60;
};

inline RiccatiState solve_are(const LinearGaussianModel& m, std::vector<std::string>* warnings = nullptr,
                              AreOptions opt = {}) {
  if (warnings) {
    if (!check_controllability(m)) warnings->push_back("model is not controllable");
    if (!check_observability(m)) warnings->push_back("model is not observable");
  }
  const int d = m.d();
  Matrix P = Matrix::Identity(d, d);
  auto rel = [](double res, const Matrix& p) { return res / (1.0 + p.squaredNorm()); };

  auto rhs = [&m](double, const Matrix& y) { return ricc_drift(m, y); };
  auto post = [](const Matrix& y) { return project_psd(y); };
  OdeOptions oo;
  oo.dt_max = 1.0;
  auto ode = make_rk4(rhs, post, oo);
  double t = 0.0;
  double chunk = 1.0 / std::max(1.0, operator_norm(m.A()) + operator_norm(m.S()) + operator_norm(m.R()));
  try {
    while (t < opt.max_ode_time && rel(ricc_residual(m, P), P) > opt.ode_residual) {
      ode.advance(t, P, t + chunk);
      if (!P.allFinite()) break;
    }
  } catch (const StepSizeUnderflow&) {
  }
  if (!P.allFinite()) P = Matrix::Identity(d, d);

  double best = ricc_residual(m, P);
  Matrix bestP = P;
  for (int it = 0; it < opt.max_newton; ++it) {
    Matrix F = m.A() - P * m.S();
    Matrix delta = solve_lyapunov(F, ricc_drift(m, P));
    Matrix next = symmetrize(P + delta);
    if (!next.allFinite()) break;
    double r = ricc_residual(m, next);
    P = next;
    if (r < best) {
      best = r;
      bestP = P;
    }
    if (r <= 1e-14 * (1.0 + P.squaredNorm())) break;
  }
  P = bestP;
  if (!(best <= 1e-8 * (1.0 + P.squaredNorm())))
    throw NoStabilizingSolution("ARE residual " + std::to_string(best) + " above tolerance");
  if (min_eigenvalue(P) < -1e-10 * std::max(1.0, sym_norm(P)))
    throw NoStabilizingSolution("ARE solution not PSD");
  if (!(spectral_abscissa(m.A() - P * m.S()) < 0.0))
    throw NoStabilizingSolution("closed loop A - P S not Hurwitz");
  return {0.0, project_psd(P)};
}

// ---- JSON ----------------------------------------------------------------

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& name) {
  if (!j.is_array() || j.empty()) throw InvalidModel(name + ": expected a non-empty array of rows");
  const auto rows = j.size();
  if (!j[0].is_array()) throw InvalidModel(name + ": expected rows as arrays");
  const auto cols = j[0].size();
  Matrix M(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw InvalidModel(name + ": ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw InvalidModel(name + ": non-numeric entry");
      M(r, c) = j[r][c].get<double>();
    }
  }
  return M;
}

inline nlohmann::json matrix_to_json(const Matrix& M) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    j.push_back(row);
  }
  return j;
}

inline LinearGaussianModel model_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidModel("model must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k != "d" && k != "d_y" && k != "A" && k != "H" && k != "R" && k != "R1")
      throw InvalidModel("unknown model key: " + k);
  }
  for (const char* k : {"d", "d_y", "A", "H", "R", "R1"})
    if (!j.contains(k)) throw InvalidModel(std::string("missing model key: ") + k);
  if (!j["d"].is_number_integer() || !j["d_y"].is_number_integer())
    throw InvalidModel("d and d_y must be integers");
  const int d = j["d"].get<int>(), dy = j["d_y"].get<int>();
  if (d < 1 || dy < 1) throw InvalidModel("d and d_y must be positive");
  Matrix A = matrix_from_json(j["A"], "A"), H = matrix_from_json(j["H"], "H"),
         R = matrix_from_json(j["R"], "R"), R1 = matrix_from_json(j["R1"], "R1");
  if (A.rows() != d || A.cols() != d || H.rows() != dy || H.cols() != d || R.rows() != d ||
      R.cols() != d || R1.rows() != dy || R1.cols() != dy)
    throw InvalidModel("matrix shapes do not match d, d_y");
  return LinearGaussianModel(A, H, R, R1);
}

inline nlohmann::json model_to_json(const LinearGaussianModel& m) {
  return {{"d", m.d()},
          {"d_y", m.d_y()},
          {"A", matrix_to_json(m.A())},
          {"H", matrix_to_json(m.H())},
          {"R", matrix_to_json(m.R())},
          {"R1", matrix_to_json(m.R1())}};
}

inline LinearGaussianModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidModel("cannot open model file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidModel(std::string("model JSON parse error: ") + e.what());
  }
  return model_from_json(j);
}

}  // namespace kbflow
