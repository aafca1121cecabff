// Scalar closed forms for A = 20, R = S = 1, N = 6.
#include <cstdio>

#include "kbflow/scalar.hpp"

using namespace kbflow;

int main() {
  const ScalarModel m(20.0, 1.0, 1.0);
  const int N = 6;
  auto eq = equilibria(m);
  std::printf("rho_plus %.6f  rho_minus %.6f  rate %.6f\n", eq.rho_plus, eq.rho_minus, contraction_rate(m));
  for (double kappa : {1.0, 0.0}) {
    InvariantDensity g(m, kappa, N);
    std::printf("\nkappa %.0f: mode %.4f  median %.4f  q99 %.4f\n", kappa, g.mode(), g.quantile(0.5),
                g.quantile(0.99));
    for (int n = 1; n <= 6; ++n) {
      auto r = g.moment(n);
      if (r.divergent)
        std::printf("  E[P^%d] diverges\n", n);
      else
        std::printf("  E[P^%d] = %.6g\n", n, r.value);
    }
    std::printf("  lyapunov %.5f\n", lyapunov_exponent(m, kappa, N));
    auto b = lyapunov_bounds(m, kappa, N);
    std::printf("  bounds [%.5f, %.5f]\n", b.lower, b.upper);
  }
}
