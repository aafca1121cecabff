#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kbflow/errors.hpp"
#include "kbflow/linalg.hpp"
#include "kbflow/random.hpp"

namespace kbflow {

struct TimeGrid {
  double t0 = 0.0;
  double dt = 1e-3;
  long steps = 0;

  TimeGrid() = default;
  TimeGrid(double t0_, double dt_, long steps_) : t0(t0_), dt(dt_), steps(steps_) {
    if (!(dt > 0.0)) throw Error("TimeGrid: dt must be positive");
    if (steps < 0) throw Error("TimeGrid: negative step count");
  }

  // Uniform grid over [t0, t0 + horizon] with step no larger than dt_max.
  static TimeGrid over(double t0, double horizon, double dt_max) {
    if (!(dt_max > 0.0)) throw Error("TimeGrid: dt must be positive");
    if (horizon < 0.0) throw Error("TimeGrid: negative horizon");
    long n = static_cast<long>(std::ceil(horizon / dt_max - 1e-9));
    if (n == 0) return TimeGrid(t0, dt_max, 0);
    return TimeGrid(t0, horizon / n, n);
  }

  double horizon() const { return dt * static_cast<double>(steps); }
  double time(long k) const { return t0 + dt * static_cast<double>(k); }
  double t_end() const { return time(steps); }
};

enum class SchemeKind { euler_maruyama, tamed_euler };

struct Scheme {
  SchemeKind kind = SchemeKind::euler_maruyama;

  // drift contribution over one step
  template <class V>
  V drift_step(const V& f, double dt) const {
    if (kind == SchemeKind::tamed_euler) return (dt / (1.0 + dt * f.norm())) * f;
    return dt * f;
  }
};

inline std::string to_string(SchemeKind k) {
  return k == SchemeKind::tamed_euler ? "tamed_euler" : "euler_maruyama";
}

inline SchemeKind scheme_from_string(const std::string& s) {
  if (s == "euler_maruyama" || s == "euler") return SchemeKind::euler_maruyama;
  if (s == "tamed_euler" || s == "tamed") return SchemeKind::tamed_euler;
  throw Error("unknown scheme: " + s);
}

// x_{k+1} = x_k + drift_step(drift(t, x)) + diffusion(t, x, dW), with dW a
// noise_dim vector of N(0, dt) increments drawn from stream.
template <class Drift, class Diffusion>
std::vector<Vector> integrate(Drift&& drift, Diffusion&& diffusion, const Vector& x0,
                              const TimeGrid& grid, Scheme scheme, NoiseStream& stream,
                              Eigen::Index noise_dim) {
  std::vector<Vector> path;
  path.reserve(static_cast<std::size_t>(grid.steps) + 1);
  path.push_back(x0);
  Vector x = x0;
  Vector dw(noise_dim);
  const double sdt = std::sqrt(grid.dt);
  for (long k = 0; k < grid.steps; ++k) {
    double t = grid.time(k);
    stream.fill_normal(dw.data(), static_cast<std::size_t>(noise_dim), sdt);
    Vector f = drift(t, x);
    x = x + scheme.drift_step(f, grid.dt) + diffusion(t, x, dw);
    if (!x.allFinite()) throw NonFinite("integrate: state left the reals", k + 1, grid.time(k + 1));
    path.push_back(x);
  }
  return path;
}

}  // namespace kbflow
