// Kalman-Bucy filter against three ensemble variants on a 2-d model.
#include <cstdio>

#include "kbflow/ensemble.hpp"
#include "kbflow/kalman.hpp"

using namespace kbflow;

int main() {
  Matrix A(2, 2), H(1, 2), R(2, 2), R1(1, 1);
  A << 0.0, 1.0, -1.0, -0.2;
  H << 1.0, 0.0;
  R << 0.2, 0.0, 0.0, 0.2;
  R1 << 0.1;
  LinearGaussianModel m(A, H, R, R1);
  const auto grid = TimeGrid::over(0.0, 5.0, 1e-3);
  const Matrix Q = Matrix::Identity(2, 2);

  auto kf = kalman_run(m, Vector::Zero(2), Q, 7, grid);
  std::printf("%-14s %10s %10s %10s\n", "variant", "|Z_T|", "tr P_T", "|P-P_kf|");
  std::printf("%-14s %10.4f %10.4f %10.4f\n", "kalman", kf.back().Z.norm(), kf.back().P.trace(), 0.0);
  for (Variant v : {Variant::vanilla, Variant::deterministic, Variant::transport}) {
    EnsembleRunOptions opt;
    opt.seed = 7;
    auto rec = run_enkf(m, v, 50, grid, opt);
    if (rec.diverged) {
      std::printf("%-14s diverged at t = %.3f\n", to_string(v).c_str(), rec.diverged->t);
      continue;
    }
    std::printf("%-14s %10.4f %10.4f %10.4f\n", to_string(v).c_str(), rec.Z.back().norm(), rec.P.back().trace(),
                (rec.P.back() - kf.back().P).norm());
  }
}
