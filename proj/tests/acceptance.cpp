// Acceptance harness: one PASS/FAIL line per criterion.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kbflow/kalman.hpp"
#include "kbflow/scalar.hpp"
#include "kbflow/study.hpp"

using namespace kbflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path out;
  int workers = 1;
  std::uint64_t seed = 20240601;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

json scalar_json(double A, double R = 1.0, double S = 1.0) { return {{"A", A}, {"R", R}, {"S", S}}; }

// Random controllable and observable model with a stable-ish drift.
LinearGaussianModel random_model(int d, int dy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  for (;;) {
    Matrix A(d, d), H(dy, d), B(d, d);
    for (auto* M : {&A, &H, &B})
      for (Eigen::Index i = 0; i < M->size(); ++i) M->data()[i] = nd(rng);
    A /= std::sqrt(double(d));
    Matrix R = B * B.transpose() / d + 0.1 * Matrix::Identity(d, d);
    LinearGaussianModel m(A, H, R, Matrix::Identity(dy, dy));
    if (check_controllability(m) && check_observability(m)) return m;
  }
}

Matrix random_psd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix B(d, d);
  for (Eigen::Index i = 0; i < B.size(); ++i) B.data()[i] = nd(rng);
  return B * B.transpose() / d;
}

StudySummary study(const Context& c, const std::string& name, json spec) {
  spec["output"] = (c.out / name).string();
  spec["workers"] = c.workers;
  if (!spec.contains("seed")) spec["seed"] = c.seed;
  return run_study(study_spec_from_json(spec));
}

const PointSummary* point(const StudySummary& s, const std::string& variant, int N = -1) {
  for (const auto& p : s.per_point)
    if (p.variant == variant && (N < 0 || p.N == N)) return &p;
  return nullptr;
}

// ---- criteria --------------------------------------------------------------------

Outcome c01(const Context&) {
  auto m = ScalarModel(20.0, 1.0, 1.0).to_linear();
  double P1 = riccati_at(m, Matrix::Zero(1, 1), 1.0)(0, 0);
  double err = std::abs(P1 - (20.0 + std::sqrt(401.0)));
  return {err < 1e-8, fmt("|P_1 - (20+sqrt401)| = %.3e (tol 1e-8)", err)};
}

Outcome c02(const Context& c) {
  auto m = random_model(4, 2, c.seed);
  auto are = solve_are(m);
  double res = ricc_drift(m, are.P).norm();
  double absc = spectral_abscissa(m.A() - are.P * m.S());
  double t = 20.0 / std::abs(absc);
  std::mt19937_64 rng(c.seed + 1);
  double worst = 0.0;
  for (int k = 0; k < 5; ++k) worst = std::max(worst, (riccati_at(m, random_psd(4, rng), t) - are.P).norm());
  return {res < 1e-8 && worst < 1e-6,
          fmt("||Ricc(P_inf)||_F = %.3e (tol 1e-8), max flow gap at t=%.2f: %.3e (tol 1e-6)", res, t, worst)};
}

Outcome c03(const Context&) {
  double worst = 0.0;
  for (double A : {-1.0, 0.0, 1.0, 20.0}) {
    ScalarModel sm(A, 1.0, 1.0);
    auto m = sm.to_linear();
    Matrix Pinf = Matrix::Constant(1, 1, equilibria(sm).rho_plus);
    for (double t : {0.1, 1.0}) {
      double E = semigroup_E(m, Pinf, 0.0, t).E(0, 0);
      worst = std::max(worst, std::abs(E - std::exp(-t * std::sqrt(A * A + 1.0))));
    }
  }
  return {worst < 1e-8, fmt("max |E_t - exp(-t sqrt(A^2+RS))| = %.3e over A in {-1,0,1,20} (tol 1e-8)", worst)};
}

Outcome c04(const Context& c) {
  json base{{"kind", "bias"},
            {"variants", {"vanilla", "deterministic"}},
            {"N", 10},
            {"trials", 10000},
            {"grid", {{"t0", 0.0}, {"dt", 2e-3}, {"T_end", 2.0}}},
            {"record_every", 50},
            {"confidence", 0.99},
            {"Q", 0.0}};
  json s1 = base;
  s1["scalar"] = scalar_json(1.0);
  auto a = study(c, "c04_d1", s1);
  json s2 = base;
  s2["model"] = model_to_json(random_model(2, 1, c.seed + 4));
  s2["Q"] = json{{0.0, 0.0}, {0.0, 0.0}};
  auto b = study(c, "c04_d2", s2);
  long rejected = 0, tested = 0;
  double worst = -1e300;
  for (const auto* s : {&a, &b})
    for (const auto& p : s->per_point) {
      ++tested;
      rejected += p.extra.value("rejects_under_bias", false);
      if (p.t > 0.0)
        worst = std::max(worst, p.extra["lower_confidence_bound"].get<double>() - p.extra["phi"].get<double>());
    }
  bool ok = a.checks["under_bias_holds"].get<bool>() && b.checks["under_bias_holds"].get<bool>();
  return {ok, fmt("%ld of %ld grid points reject E[P_hat] <= phi at 99%% (max LCB - phi over t > 0: %.2e)", rejected, tested,
                  worst)};
}

Outcome c05(const Context& c) {
  json spec{{"kind", "fluctuation_rate"},
            {"scalar", scalar_json(1.0)},
            {"variants", {"vanilla", "deterministic"}},
            {"N", {8, 16, 32, 64, 128, 256}},
            {"trials", 4000},
            {"grid", {{"t0", 0.0}, {"dt", 2e-3}, {"T_end", 1.0}}},
            {"Q", 1.0}};
  auto s = study(c, "c05", spec);
  bool ok = true;
  std::ostringstream os;
  for (const char* v : {"vanilla", "deterministic"}) {
    double slope = s.fits["by_variant"][v]["slope"].get<double>();
    double se = s.fits["by_variant"][v]["stderr"].get<double>();
    ok = ok && slope >= -0.6 && slope <= -0.4;
    os << fmt("%s slope %.4f +- %.4f; ", v, slope, se);
  }
  os << "target [-0.6, -0.4]";
  return {ok, os.str()};
}

Outcome c06(const Context& c) {
  json spec{{"kind", "clt_variance"},
            {"scalar", scalar_json(1.0)},
            {"variant", "deterministic"},
            {"N", 256},
            {"trials", 10000},
            {"grid", {{"t0", 0.0}, {"dt", 1e-3}, {"T_end", 1.0}}},
            {"Q", 0.0}};
  auto s = study(c, "c06", spec);
  const auto* p = point(s, "deterministic", 256);
  double oracle = p->extra["oracle_variance"].get<double>();
  double rel = p->extra["relative_error"].get<double>();
  return {std::abs(rel) < 0.05,
          fmt("Var(sqrt(N)(P_hat - phi)) = %.5f vs oracle %.5f, rel err %.4f (tol 0.05)", p->var, oracle, rel)};
}

Outcome c07(const Context& c) {
  json spec{{"kind", "invariant_ks"},
            {"scalar", scalar_json(20.0)},
            {"variants", {"vanilla", "deterministic"}},
            {"N", 6},
            {"trials", 4},
            {"samples", 20000},
            {"grid", {{"t0", 0.0}, {"dt", 1e-4}, {"T_end", 1.0}}}};
  auto s = study(c, "c07", spec);
  const auto* v = point(s, "vanilla");
  const auto* d = point(s, "deterministic");
  bool ok = v->ks < 0.02 && d->ks < 0.02 && v->samples >= 10000 && d->samples >= 10000;
  return {ok, fmt("KS vanilla %.4f (%ld samples), deterministic %.4f (%ld samples), tol 0.02", v->ks, v->samples,
                  d->ks, d->samples)};
}

Outcome c08(const Context& c) {
  auto m = ScalarModel(20.0, 1.0, 1.0).to_linear();
  const std::size_t lo = 1 << 13;
  StationaryOptions o;
  o.N = 6;
  o.dt = 1e-4;
  o.seed = c.seed;

  o.variant = Variant::vanilla;
  o.target = 1 << 19;
  o.level = 1;
  auto v = stationary_samples(m, o);
  std::vector<double> x(v.thinned.begin(), v.thinned.begin() + std::min<std::size_t>(v.thinned.size(), 1 << 19));
  double hill = hill_tail_index(x, 200);
  auto r4 = moment_stability(x, lo, x.size(), 4);
  auto r6 = moment_stability(x, lo, x.size(), 6);

  o.variant = Variant::deterministic;
  o.target = 1 << 17;
  o.level = 2;
  auto d = stationary_samples(m, o);
  std::vector<double> y(d.thinned.begin(), d.thinned.begin() + std::min<std::size_t>(d.thinned.size(), 1 << 17));
  double worst = 1.0;
  bool all9 = true;
  for (int p = 1; p <= 9; ++p) {
    auto r = moment_stability(y, lo, y.size(), p);
    all9 = all9 && r.stable;
    worst = std::max(worst, std::max(r.ratio, 1.0 / r.ratio));
  }
  bool ok = std::abs(hill - 5.0) <= 1.0 && r4.stable && r6.ratio > 1.5 && all9;
  return {ok, fmt("vanilla: Hill %.3f (target 5 +- 1), 4th-moment ratio %.3f, 6th-moment ratio %.3f (> 1.5); "
                  "deterministic: worst ratio over orders 1-9 %.4f (< 1.5)",
                  hill, r4.ratio, r6.ratio, worst)};
}

Outcome c09(const Context& c) {
  json spec{{"kind", "lyapunov"},
            {"scalar", scalar_json(20.0)},
            {"variant", "deterministic"},
            {"N", 6},
            {"trials", 4},
            {"grid", {{"t0", 0.0}, {"dt", 1e-4}, {"T_end", 25.0}}}};
  auto s = study(c, "c09", spec);
  const auto* p = point(s, "deterministic", 6);
  double quad = p->extra["quadrature"].get<double>();
  double rel = p->extra["relative_error"].get<double>();
  double lo = -std::sqrt(400.0 + 1.0), hi = -std::sqrt(400.0 + 1.0 * (1.0 - 4.0 / 6.0));
  bool ok = quad >= lo && quad <= hi && rel < 0.02;
  return {ok, fmt("quadrature %.5f in [%.5f, %.5f]; ergodic average %.5f, rel err %.4f (tol 0.02)", quad, lo, hi,
                  p->mean, rel)};
}

Outcome c10(const Context& c) {
  double worst = 0.0;
  for (int d : {1, 2, 3}) {
    auto m = random_model(d, 1, c.seed + 10 + d);
    auto grid = TimeGrid::over(0.0, 2.0, 1e-3);
    EnsembleRunOptions opt;
    opt.seed = c.seed;
    opt.truth.detached = true;
    auto rec = run_enkf(m, Variant::transport, 2 * d, grid, opt);
    auto flow = riccati_flow(m, rec.P.front(), grid);
    for (std::size_t k = 0; k < rec.size(); ++k) worst = std::max(worst, (rec.P[k] - flow[k].P).norm());
  }
  return {worst < 1e-6, fmt("max ||P_hat_t - phi_t(P_hat_0)|| = %.3e over d in {1,2,3}, N = 2d (tol 1e-6)", worst)};
}

Outcome c11(const Context& c) {
  auto m = ScalarModel(1.0, 1.0, 1.0).to_linear();
  const long trials = 10000;
  bool ok = true;
  std::ostringstream os;
  for (Variant v : {Variant::vanilla, Variant::deterministic}) {
    std::vector<std::vector<double>> end(2);
    for (int law = 0; law < 2; ++law) {
      PathRequest rq;
      rq.variant = v;
      rq.law = law == 1;
      rq.N = 10;
      rq.Q = Matrix::Zero(1, 1);
      rq.m0 = Vector::Zero(1);
      rq.grid = TimeGrid::over(0.0, 1.0, 1e-3);
      rq.every = rq.grid.steps;
      rq.seed = c.seed;
      rq.level = 11;
      auto res = run_trials(trials, c.workers, [&](long k) {
        auto r = rq;
        r.trial = static_cast<std::uint32_t>(k);
        return p_hat_path(m, r).P.back()(0, 0);
      });
      for (auto& r : res) end[law].push_back(*r);
    }
    for (int p = 1; p <= 2; ++p) {
      std::vector<double> a, b;
      for (double x : end[0]) a.push_back(std::pow(x, p));
      for (double x : end[1]) b.push_back(std::pow(x, p));
      double diff = mean_of(a) - mean_of(b);
      double se = std::sqrt(variance_of(a) / a.size() + variance_of(b) / b.size());
      ok = ok && std::abs(diff) < 3.0 * se;
      os << fmt("%s m%d: particle %.5f law %.5f (%.2f sigma); ", to_string(v).c_str(), p, mean_of(a), mean_of(b),
                std::abs(diff) / se);
    }
  }
  os << "tol 3 sigma";
  return {ok, os.str()};
}

Outcome c12(const Context& c) {
  auto m = random_model(2, 1, c.seed + 12);
  auto grid = TimeGrid::over(0.0, 3.0, 1e-3);
  double worst = 0.0;
  for (Variant v : {Variant::vanilla, Variant::deterministic}) {
    EnsembleRunOptions opt;
    opt.seed = c.seed;
    auto rec = run_enkf(m, v, 8, grid, opt);
    for (std::size_t t : {rec.size() / 3, rec.size() - 1}) {
      auto g = stochastic_semigroup(m, rec.P, grid.dt, 0, t);
      double integral = 0.0;
      for (std::size_t k = 0; k < t; ++k) integral += (m.A() - rec.P[k] * m.S()).trace() * grid.dt;
      worst = std::max(worst, std::abs(g.value().determinant() - std::exp(integral)));
    }
  }
  return {worst < 1e-6, fmt("max |det E_hat_t - exp(int Tr(A - P_hat S))| = %.3e (tol 1e-6)", worst)};
}

Outcome c13(const Context& c) {
  json spec{{"kind", "semigroup_contraction"},
            {"scalar", scalar_json(20.0)},
            {"variants", {"vanilla", "deterministic"}},
            {"N", 40},
            {"trials", 200},
            {"grid", {{"t0", 0.0}, {"dt", 1e-3}, {"T_end", 20.0}}},
            {"Q", 1.0}};
  auto s = study(c, "c13", spec);
  std::ostringstream os;
  bool ok = true;
  for (const auto& p : s.per_point) {
    double f = p.extra["frequency_below"].get<double>();
    ok = ok && f >= 0.9;
    os << fmt("%s frequency %.3f; ", p.variant.c_str(), f);
  }
  os << "threshold 0.5*mu(A - P_inf S) = " << fmt("%.4f", s.per_point.front().extra["threshold"].get<double>())
     << ", tol >= 0.9";
  return {ok, os.str()};
}

Outcome c14(const Context& c) {
  json spec{{"kind", "inflation_sweep"},
            {"scalar", scalar_json(1.0)},
            {"N", 10},
            {"xi", 0.5},
            {"T", 1.0},
            {"Q", 0.5},
            {"grid", {{"t0", 0.0}, {"dt", 1e-3}, {"T_end", 5.0}}}};
  auto a = study(c, "c14_d1", spec);
  spec.erase("scalar");
  auto r = random_model(2, 2, c.seed + 14);
  spec["model"] = model_to_json(LinearGaussianModel(r.A(), Matrix::Identity(2, 2), r.R(), Matrix::Identity(2, 2)));
  spec["T"] = json{{1.0, 0.0}, {0.0, 1.0}};
  spec["Q"] = json{{0.5, 0.1}, {0.1, 0.3}};
  auto b = study(c, "c14_d2", spec);
  double worst = 1e300;
  for (const auto* s : {&a, &b})
    for (const auto& p : s->per_point) worst = std::min(worst, p.extra["min_margin"].get<double>());
  bool ok = a.checks["inflation_ordering_holds"].get<bool>() && b.checks["inflation_ordering_holds"].get<bool>();
  return {ok, fmt("smallest ordering eigenvalue margin %.3e (slack -1e-8)", worst)};
}

struct Criterion {
  int id;
  const char* name;
  double max_seconds;  // 0 = no runtime bound
  std::function<Outcome(const Context&)> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list{
      {1, "scalar_riccati_fixed_point", 1.0, c01},
      {2, "are_residual_and_flow_convergence", 10.0, c02},
      {3, "semigroup_rate_at_equilibrium", 0.0, c03},
      {4, "under_bias", 120.0, c04},
      {5, "fluctuation_rate", 300.0, c05},
      {6, "clt_variance_oracle", 180.0, c06},
      {7, "invariant_densities_ks", 600.0, c07},
      {8, "moment_existence", 0.0, c08},
      {9, "lyapunov_exponent", 300.0, c09},
      {10, "transport_exactness", 0.0, c10},
      {11, "law_equivalence", 0.0, c11},
      {12, "liouville_identity", 0.0, c12},
      {13, "semigroup_contraction_event", 0.0, c13},
      {14, "inflation_ordering", 0.0, c14},
  };
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kbflow acceptance criteria"};
  std::vector<int> only;
  Context ctx;
  std::string out = (fs::temp_directory_path() / "kbflow_acceptance").string();
  ctx.workers = default_workers();
  app.add_option("--criterion", only, "run only these criteria (1-14)");
  app.add_option("--workers", ctx.workers, "worker threads");
  app.add_option("--seed", ctx.seed, "master seed");
  app.add_option("--out", out, "scratch directory for study outputs");
  CLI11_PARSE(app, argc, argv);
  ctx.out = out;
  fs::create_directories(ctx.out);

  int failures = 0;
  for (const auto& c : criteria()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool in_time = c.max_seconds <= 0.0 || secs < c.max_seconds;
    bool pass = o.pass && in_time;
    failures += !pass;
    std::string budget = c.max_seconds > 0.0 ? fmt(" / %.0fs", c.max_seconds) : std::string();
    std::cout << (pass ? "PASS" : "FAIL") << fmt(" [%02d] %s: ", c.id, c.name) << o.detail
              << fmt(" (%.1fs%s)", secs, budget.c_str()) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
