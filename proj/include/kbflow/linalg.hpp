#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "kbflow/errors.hpp"

namespace kbflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline Matrix expm(const Matrix& m) { return m.exp(); }

inline double min_eigenvalue(const Matrix& m) {
  if (m.rows() == 1) return m(0, 0);
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double max_eigenvalue(const Matrix& m) {
  if (m.rows() == 1) return m(0, 0);
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

// Spectral norm of a symmetric matrix.
inline double sym_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  if (m.rows() == 1) return std::abs(m(0, 0));
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline double operator_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  if (m.rows() == 1 && m.cols() == 1) return std::abs(m(0, 0));
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

// Eigenvalues of symmetric m clamped from below at floor (default 0).
inline Matrix project_psd(const Matrix& m, double floor = 0.0) {
  if (m.rows() == 1) return Matrix::Constant(1, 1, std::max(m(0, 0), floor));
  Matrix s = symmetrize(m);
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  const Vector& lam = es.eigenvalues();
  if (lam.minCoeff() >= floor) return s;
  Vector clipped = lam.cwiseMax(floor);
  return symmetrize(es.eigenvectors() * clipped.asDiagonal() *
                    es.eigenvectors().transpose());
}

inline Matrix symmetric_sqrt(const Matrix& q) {
  if (q.rows() == 1) {
    double v = q(0, 0);
    if (v < -1e-10 * std::abs(v)) throw NotPSD("symmetric_sqrt: negative scalar");
    return Matrix::Constant(1, 1, std::sqrt(std::max(v, 0.0)));
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(q));
  const Vector& lam = es.eigenvalues();
  double scale = lam.cwiseAbs().maxCoeff();
  double clamp_tol = 1e-10 * scale;
  if (lam.minCoeff() < -clamp_tol)
    throw NotPSD("symmetric_sqrt: min eigenvalue " + std::to_string(lam.minCoeff()));
  Vector root = lam.cwiseMax(0.0).cwiseSqrt();
  return symmetrize(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
}

inline int numerical_rank(const Matrix& m, double rank_tol = 1e-10) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& sv = svd.singularValues();
  if (sv(0) <= 0.0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > rank_tol * sv(0)) ++r;
  return r;
}

inline double condition_number(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& sv = svd.singularValues();
  double smin = sv(sv.size() - 1);
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return sv(0) / smin;
}

// Moore-Penrose inverse, singular values below cutoff * sigma_max dropped.
inline Matrix pseudo_inverse(const Matrix& m, double cutoff = 1e-10) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  Vector inv = Vector::Zero(sv.size());
  double smax = sv.size() ? sv(0) : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff * smax) inv(i) = 1.0 / sv(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

inline double spectral_abscissa(const Matrix& m) {
  if (m.rows() == 1) return m(0, 0);
  Eigen::EigenSolver<Matrix> es(m, false);
  return es.eigenvalues().real().maxCoeff();
}

inline double log_norm(const Matrix& m) { return max_eigenvalue(symmetrize(m)); }

// Solves F X + X F' + Q = 0 through the Kronecker form.
inline Matrix solve_lyapunov(const Matrix& f, const Matrix& q) {
  const Eigen::Index d = f.rows();
  Matrix id = Matrix::Identity(d, d);
  Matrix k = Matrix::Zero(d * d, d * d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      // vec(F X) = (I kron F) vec X, vec(X F') = (F kron I) vec X
      k.block(i * d, j * d, d, d) += id(i, j) * f;
      k.block(i * d, j * d, d, d) += f(i, j) * id;
    }
  Eigen::Map<const Vector> vq(q.data(), d * d);
  Vector x = k.fullPivLu().solve(-vq);
  return symmetrize(Eigen::Map<Matrix>(x.data(), d, d));
}

namespace detail {

inline bool has_perfect_matching(const std::vector<std::vector<int>>& adj, int n) {
  std::vector<int> match(n, -1);
  for (int u = 0; u < n; ++u) {
    std::vector<char> seen(n, 0);
    // Kuhn augmenting path
    std::function<bool(int)> dfs = [&](int v) -> bool {
      for (int w : adj[v]) {
        if (seen[w]) continue;
        seen[w] = 1;
        if (match[w] < 0 || dfs(match[w])) {
          match[w] = v;
          return true;
        }
      }
      return false;
    };
    if (!dfs(u)) return false;
  }
  return true;
}

}  // namespace detail

inline double spectral_matching_distance(const Matrix& m1, const Matrix& m2) {
  if (m1.rows() != m2.rows() || m1.rows() != m1.cols() || m2.rows() != m2.cols())
    throw Error("spectral_matching_distance: dimension mismatch");
  const int d = static_cast<int>(m1.rows());
  Eigen::VectorXcd l1 = Eigen::EigenSolver<Matrix>(m1, false).eigenvalues();
  Eigen::VectorXcd l2 = Eigen::EigenSolver<Matrix>(m2, false).eigenvalues();
  std::vector<std::vector<double>> cost(d, std::vector<double>(d));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) cost[i][j] = std::abs(l1(i) - l2(j));

  if (d <= 8) {
    std::vector<int> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double worst = 0.0;
      for (int i = 0; i < d && worst < best; ++i) worst = std::max(worst, cost[i][perm[i]]);
      best = std::min(best, worst);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
  }

  // bottleneck assignment: smallest threshold admitting a perfect matching
  std::vector<double> levels;
  levels.reserve(d * d);
  for (auto& row : cost) levels.insert(levels.end(), row.begin(), row.end());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  std::size_t lo = 0, hi = levels.size() - 1;
  while (lo < hi) {
    std::size_t mid = (lo + hi) / 2;
    std::vector<std::vector<int>> adj(d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        if (cost[i][j] <= levels[mid]) adj[i].push_back(j);
    if (detail::has_perfect_matching(adj, d))
      hi = mid;
    else
      lo = mid + 1;
  }
  return levels[lo];
}

}  // namespace kbflow
