#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "kbflow/errors.hpp"
#include "kbflow/linalg.hpp"

namespace kbflow {

struct OdeOptions {
  double tol = 1e-8;  // local error per unit time, scaled by (1 + |y|)
  double dt_min = 1e-12;
  double dt_init = 1e-3;
  double dt_max = 0.1;
};

template <class F>
Matrix rk4_step(F& f, double t, const Matrix& y, double h) {
  Matrix k1 = f(t, y);
  Matrix k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
  Matrix k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
  Matrix k4 = f(t + h, y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Classical RK4 with step-doubling error control. The step size persists
// across advance() calls so a dense output grid does not reset it.
template <class F, class Post>
class AdaptiveRk4 {
 public:
  AdaptiveRk4(F f, Post post, OdeOptions opt = {})
      : f_(std::move(f)), post_(std::move(post)), opt_(opt), h_(opt.dt_init) {}

  void advance(double& t, Matrix& y, double t_end) {
    while (t < t_end) {
      double h = std::min({h_, opt_.dt_max, t_end - t});
      bool last = (h == t_end - t);
      Matrix full = rk4_step(f_, t, y, h);
      Matrix half = rk4_step(f_, t, y, 0.5 * h);
      half = rk4_step(f_, t + 0.5 * h, half, 0.5 * h);
      Matrix diff = half - full;
      double err = diff.norm() / 15.0;
      double allowed = opt_.tol * h * (1.0 + half.norm());
      if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
      if (err <= allowed) {
        y = post_(half + diff / 15.0);
        t = last ? t_end : t + h;
        double grow = err > 0 ? 0.9 * std::pow(allowed / err, 0.2) : 4.0;
        if (!last || grow < 1.0) h_ = h * std::clamp(grow, 0.2, 4.0);
      } else {
        double shrink = std::isfinite(err) ? 0.9 * std::pow(allowed / err, 0.2) : 0.1;
        h_ = h * std::clamp(shrink, 0.1, 0.9);
        if (h_ < opt_.dt_min)
          throw StepSizeUnderflow("adaptive RK4: step below " + std::to_string(opt_.dt_min) +
                                  " at t=" + std::to_string(t));
      }
    }
  }

  double step_size() const { return h_; }

 private:
  F f_;
  Post post_;
  OdeOptions opt_;
  double h_;
};

template <class F, class Post>
AdaptiveRk4<F, Post> make_rk4(F f, Post post, OdeOptions opt = {}) {
  return AdaptiveRk4<F, Post>(std::move(f), std::move(post), opt);
}

}  // namespace kbflow
