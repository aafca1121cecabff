#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbflow/ensemble.hpp"
#include "kbflow/io.hpp"
#include "kbflow/kalman.hpp"
#include "kbflow/scalar.hpp"
#include "kbflow/stats.hpp"

namespace kbflow {

using nlohmann::json;

// ---- worker pool ------------------------------------------------------------

inline std::atomic<bool>& interrupt_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

// Runs f(trial) for trial = 0..trials-1 on up to `workers` threads. Results
// land at their trial index; trials skipped after an interrupt stay empty.
template <class F>
auto run_trials(long trials, int workers, F&& f) -> std::vector<std::optional<decltype(f(0L))>> {
  using R = decltype(f(0L));
  std::vector<std::optional<R>> out(static_cast<std::size_t>(std::max(0L, trials)));
  std::atomic<long> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto work = [&] {
    for (;;) {
      if (interrupt_flag().load()) return;
      long k = next.fetch_add(1);
      if (k >= trials) return;
      try {
        out[static_cast<std::size_t>(k)] = f(k);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
        next.store(trials);
        return;
      }
    }
  };
  int w = std::max(1, std::min<int>(workers, static_cast<int>(std::max(1L, trials))));
  if (w == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < w; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (err) std::rethrow_exception(err);
  return out;
}

inline int default_workers() {
  if (const char* env = std::getenv("KBFLOW_WORKERS")) {
    try {
      int v = std::stoi(env);
      if (v > 0) return v;
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---- spec ---------------------------------------------------------------------

enum class StudyKind {
  bias,
  fluctuation_rate,
  invariant_ks,
  moments_flow,
  lyapunov,
  inflation_sweep,
  semigroup_contraction,
  clt_variance
};

inline std::string to_string(StudyKind k) {
  switch (k) {
    case StudyKind::bias: return "bias";
    case StudyKind::fluctuation_rate: return "fluctuation_rate";
    case StudyKind::invariant_ks: return "invariant_ks";
    case StudyKind::moments_flow: return "moments_flow";
    case StudyKind::lyapunov: return "lyapunov";
    case StudyKind::inflation_sweep: return "inflation_sweep";
    case StudyKind::semigroup_contraction: return "semigroup_contraction";
    case StudyKind::clt_variance: return "clt_variance";
  }
  return "?";
}

inline StudyKind study_kind_from_string(const std::string& s) {
  for (auto k : {StudyKind::bias, StudyKind::fluctuation_rate, StudyKind::invariant_ks, StudyKind::moments_flow,
                 StudyKind::lyapunov, StudyKind::inflation_sweep, StudyKind::semigroup_contraction,
                 StudyKind::clt_variance})
    if (to_string(k) == s) return k;
  throw Error("unknown study kind: " + s);
}

struct SpecError : Error {
  using Error::Error;
};

struct StudySpec {
  StudyKind kind = StudyKind::bias;
  std::optional<LinearGaussianModel> model;
  std::vector<Variant> variants{Variant::vanilla};
  bool law = false;
  std::vector<int> N{10};
  long trials = 100;
  double t0 = 0.0, dt = 1e-3, T_end = 1.0;
  long record_every = 1;
  std::uint64_t seed = 1;
  std::string output = "out";
  std::optional<Matrix> Q;
  std::optional<Vector> m0;
  std::optional<SchemeKind> scheme;
  double confidence = 0.99;
  std::vector<double> xi{0.5};
  std::optional<Matrix> T;
  long samples = 10000;  // effective stationary samples
  double burn_in = -1.0;
  double record_dt = -1.0;
  long stationary_samples = 0;
  std::vector<long> batch{8192, 524288};
  long hill_k = 200;
  int paths = 100;
  int workers = 0;
  json echo;

  TimeGrid grid() const { return TimeGrid::over(t0, T_end - t0, dt); }
  int d() const { return model->d(); }
  Matrix Q_or_default() const { return Q ? *Q : Matrix::Identity(d(), d()); }
  Vector m0_or_default() const { return m0 ? *m0 : Vector::Zero(d()); }
};

namespace detail {

inline Matrix matrix_or_scalar(const json& j, const std::string& name) {
  if (j.is_number()) return Matrix::Constant(1, 1, j.get<double>());
  try {
    return matrix_from_json(j, name);
  } catch (const InvalidModel& e) {
    throw SpecError(e.what());
  }
}

template <class T>
std::vector<T> one_or_many(const json& j) {
  if (j.is_array()) return j.get<std::vector<T>>();
  return {j.get<T>()};
}

inline void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw SpecError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline LinearGaussianModel scalar_model_from_json(const json& j) {
  detail::require_keys(j, {"A", "R", "S"}, "scalar model");
  ScalarModel sm(j.value("A", 0.0), j.value("R", 1.0), j.value("S", 1.0));
  return sm.to_linear();
}

// base_dir resolves relative model paths.
inline StudySpec study_spec_from_json(const json& j, const std::string& base_dir = ".") {
  if (!j.is_object()) throw SpecError("study spec must be a JSON object");
  detail::require_keys(j,
                       {"kind", "model", "scalar", "variant", "variants", "kappa", "mode", "N", "trials", "grid",
                        "record_every", "seed", "output", "Q", "m0", "scheme", "confidence", "xi", "T", "samples",
                        "burn_in", "record_dt", "stationary_samples", "batch", "hill_k", "paths", "workers"},
                       "study spec");
  StudySpec s;
  s.echo = j;
  try {
    if (!j.contains("kind")) throw SpecError("study spec needs 'kind'");
    s.kind = study_kind_from_string(j["kind"].get<std::string>());
    if (j.contains("model") && j.contains("scalar")) throw SpecError("give either 'model' or 'scalar'");
    if (j.contains("model")) {
      if (j["model"].is_string()) {
        std::filesystem::path p(j["model"].get<std::string>());
        if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
        s.model = load_model(p.string());
      } else {
        s.model = model_from_json(j["model"]);
      }
    } else if (j.contains("scalar")) {
      s.model = scalar_model_from_json(j["scalar"]);
    } else {
      throw SpecError("study spec needs 'model' or 'scalar'");
    }
    if (j.contains("variant") + j.contains("variants") + j.contains("kappa") > 1)
      throw SpecError("give only one of 'variant', 'variants', 'kappa'");
    if (j.contains("variant") || j.contains("variants")) {
      s.variants.clear();
      for (auto& v : detail::one_or_many<std::string>(j.contains("variant") ? j["variant"] : j["variants"]))
        s.variants.push_back(variant_from_string(v));
    }
    if (j.contains("kappa")) {
      s.variants.clear();
      for (double k : detail::one_or_many<double>(j["kappa"])) {
        if (k != 0.0 && k != 1.0) throw SpecError("kappa must be 0 or 1");
        s.variants.push_back(k == 1.0 ? Variant::vanilla : Variant::deterministic);
      }
    }
    if (j.contains("mode")) {
      auto m = j["mode"].get<std::string>();
      if (m != "particle" && m != "law") throw SpecError("mode must be 'particle' or 'law'");
      s.law = m == "law";
    }
    if (j.contains("N")) s.N = detail::one_or_many<int>(j["N"]);
    if (j.contains("trials")) s.trials = j["trials"].get<long>();
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      detail::require_keys(g, {"t0", "dt", "T_end"}, "grid");
      s.t0 = g.value("t0", 0.0);
      s.dt = g.value("dt", s.dt);
      s.T_end = g.value("T_end", s.T_end);
    } else if (s.kind == StudyKind::invariant_ks || s.kind == StudyKind::lyapunov) {
      s.dt = 1e-4;
    }
    if (j.contains("record_every")) s.record_every = j["record_every"].get<long>();
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("output")) s.output = j["output"].get<std::string>();
    if (j.contains("Q")) s.Q = detail::matrix_or_scalar(j["Q"], "Q");
    if (j.contains("m0")) {
      auto v = j["m0"].get<std::vector<double>>();
      s.m0 = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    if (j.contains("scheme")) s.scheme = scheme_from_string(j["scheme"].get<std::string>());
    if (j.contains("confidence")) s.confidence = j["confidence"].get<double>();
    if (j.contains("xi")) s.xi = detail::one_or_many<double>(j["xi"]);
    if (j.contains("T")) s.T = detail::matrix_or_scalar(j["T"], "T");
    if (j.contains("samples")) s.samples = j["samples"].get<long>();
    if (j.contains("burn_in")) s.burn_in = j["burn_in"].get<double>();
    if (j.contains("record_dt")) s.record_dt = j["record_dt"].get<double>();
    if (j.contains("stationary_samples")) s.stationary_samples = j["stationary_samples"].get<long>();
    if (j.contains("batch")) s.batch = j["batch"].get<std::vector<long>>();
    if (j.contains("hill_k")) s.hill_k = j["hill_k"].get<long>();
    if (j.contains("paths")) s.paths = j["paths"].get<int>();
    if (j.contains("workers")) s.workers = j["workers"].get<int>();
  } catch (const json::exception& e) {
    throw SpecError(std::string("study spec: ") + e.what());
  } catch (const InvalidModel& e) {
    throw SpecError(std::string("study spec model: ") + e.what());
  }

  const int d = s.model->d();
  if (s.N.empty()) throw SpecError("N list is empty");
  for (int n : s.N)
    if (n < 1) throw SpecError("N must be at least 1");
  if (s.trials < 1) throw SpecError("trials must be positive");
  if (!(s.dt > 0.0)) throw SpecError("grid.dt must be positive");
  if (!(s.T_end > s.t0)) throw SpecError("grid.T_end must exceed grid.t0");
  if (s.record_every < 1) throw SpecError("record_every must be positive");
  if (s.Q && (s.Q->rows() != d || s.Q->cols() != d)) throw SpecError("Q has the wrong shape");
  if (s.m0 && s.m0->size() != d) throw SpecError("m0 has the wrong length");
  if (s.T && (s.T->rows() != d || s.T->cols() != d)) throw SpecError("T has the wrong shape");
  if (!(s.confidence > 0.5 && s.confidence < 1.0)) throw SpecError("confidence must lie in (0.5, 1)");
  if (s.batch.size() != 2 || s.batch[0] < 2 || s.batch[1] <= s.batch[0]) throw SpecError("batch must be [lo, hi]");
  if (s.kind == StudyKind::bias && s.trials < 100) throw SpecError("bias studies need at least 100 trials");
  if (s.kind == StudyKind::fluctuation_rate) {
    if (s.N.size() < 2) throw SpecError("fluctuation_rate needs at least two N values");
    for (std::size_t i = 1; i < s.N.size(); ++i)
      if (s.N[i] <= s.N[i - 1]) throw SpecError("N list must be strictly increasing for rate studies");
  }
  bool scalar_only = s.kind == StudyKind::invariant_ks || s.kind == StudyKind::lyapunov ||
                     s.kind == StudyKind::clt_variance || s.kind == StudyKind::moments_flow;
  if (scalar_only && (d != 1 || s.model->d_y() != 1)) throw SpecError(to_string(s.kind) + " needs a scalar model");
  for (auto v : s.variants) {
    if (v == Variant::transport && (scalar_only || s.law))
      throw SpecError("transport variant is not available for this study");
  }
  return s;
}

inline StudySpec load_study_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open study spec " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw SpecError(std::string("study spec parse error: ") + e.what());
  }
  return study_spec_from_json(j, std::filesystem::path(path).parent_path().string());
}

// ---- summary ------------------------------------------------------------------

struct PointSummary {
  std::string variant;
  int N = 0;
  double t = 0.0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double var = std::numeric_limits<double>::quiet_NaN();
  double l2 = std::numeric_limits<double>::quiet_NaN();
  double l4 = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> std_moments;  // orders 3..9
  double ks = std::numeric_limits<double>::quiet_NaN();
  long diverged = 0;
  long samples = 0;
  json extra = json::object();
};

struct StudySummary {
  json spec_echo;
  std::vector<PointSummary> per_point;
  json fits = json::object();
  json checks = json::object();
  bool interrupted = false;
  long requested_trials = 0;
  long completed_trials = 0;
  std::vector<std::string> files;
};

inline void fill_point(PointSummary& p, const std::vector<double>& x) {
  p.samples = static_cast<long>(x.size());
  if (x.empty()) return;
  auto m = moments_of(x);
  p.mean = m.mean();
  p.var = m.variance();
  p.l2 = ln_norm(x, 2.0);
  p.l4 = ln_norm(x, 4.0);
  p.std_moments.clear();
  if (x.size() > 2 && m.central(2) > 0.0)
    for (int k = 3; k <= 9; ++k) p.std_moments.push_back(m.standardized(k));
}

inline json json_number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return nullptr;
  return v > 0 ? "inf" : "-inf";
}

inline json to_json(const PointSummary& p) {
  json sm = json::array();
  for (double v : p.std_moments) sm.push_back(json_number(v));
  json j = {{"variant", p.variant}, {"N", p.N},           {"t", json_number(p.t)},  {"mean", json_number(p.mean)},
            {"var", json_number(p.var)}, {"l2", json_number(p.l2)}, {"l4", json_number(p.l4)}, {"std_moments", sm},
            {"ks", json_number(p.ks)},  {"diverged", p.diverged},  {"samples", p.samples}};
  for (auto it = p.extra.begin(); it != p.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline json to_json(const StudySummary& s) {
  json pts = json::array();
  for (const auto& p : s.per_point) pts.push_back(to_json(p));
  return {{"spec_echo", s.spec_echo},
          {"per_point", pts},
          {"fits", s.fits},
          {"checks", s.checks},
          {"interrupted", s.interrupted},
          {"requested_trials", s.requested_trials},
          {"completed_trials", s.completed_trials},
          {"files", s.files}};
}

inline CsvTable per_point_table(const StudySummary& s) {
  CsvTable t;
  t.header = {"variant", "N", "t", "mean", "var", "l2", "l4"};
  for (int k = 3; k <= 9; ++k) t.header.push_back("m" + std::to_string(k));
  for (const char* c : {"ks", "diverged", "samples"}) t.header.emplace_back(c);
  for (const auto& p : s.per_point) {
    std::vector<std::string> r{p.variant, std::to_string(p.N), fmt_double(p.t), fmt_double(p.mean),
                               fmt_double(p.var), fmt_double(p.l2), fmt_double(p.l4)};
    for (int k = 0; k < 7; ++k)
      r.push_back(k < static_cast<int>(p.std_moments.size()) ? fmt_double(p.std_moments[k]) : "nan");
    r.push_back(fmt_double(p.ks));
    r.push_back(std::to_string(p.diverged));
    r.push_back(std::to_string(p.samples));
    t.rows.push_back(std::move(r));
  }
  return t;
}

// ---- simulation helpers ---------------------------------------------------------

inline std::uint32_t stream_level(std::size_t variant_index, std::size_t n_index) {
  return static_cast<std::uint32_t>(1 + variant_index * 256 + n_index);
}

struct PathResult {
  std::vector<Matrix> P;  // at recorded grid points
  bool diverged = false;
  double diverged_at = std::numeric_limits<double>::quiet_NaN();
};

struct PathRequest {
  Variant variant = Variant::vanilla;
  bool law = false;
  int N = 10;
  Matrix Q;
  Vector m0;
  TimeGrid grid;
  long every = 1;
  std::uint64_t seed = 1;
  std::uint32_t trial = 0;
  std::uint32_t level = 0;
  std::optional<Inflation> inflation;
  std::optional<SchemeKind> scheme;
};

// Sample covariance path of one trial with a detached truth (the covariance
// law does not depend on the observations for linear models).
inline PathResult p_hat_path(const LinearGaussianModel& m, const PathRequest& rq) {
  PathResult out;
  const long steps = rq.grid.steps;
  auto record = [&](long k) { return k % rq.every == 0 || k == steps; };
  if (rq.law) {
    LawLevelOptions lo;
    lo.seed = rq.seed;
    lo.trial = rq.trial;
    lo.level = rq.level;
    lo.scheme = rq.scheme;
    lo.inflation = rq.inflation;
    LawLevelSimulator sim(m, kappa_of(rq.variant), rq.N, rq.Q, rq.m0, lo);
    NoiseStream w(rq.seed, rq.trial, Channel::truth_obs, rq.level);
    Vector dw(m.d_y());
    const double sdt = std::sqrt(rq.grid.dt);
    out.P.push_back(sim.P());
    for (long k = 0; k < steps; ++k) {
      w.fill_normal(dw.data(), static_cast<std::size_t>(dw.size()), sdt);
      sim.step(m.R1_sqrt() * dw, rq.grid.dt);
      if (!sim.P().allFinite() || !sim.X().allFinite()) {
        out.diverged = true;
        out.diverged_at = rq.grid.time(k + 1);
        return out;
      }
      if (record(k + 1)) out.P.push_back(sim.P());
    }
    return out;
  }
  NoiseStream init(rq.seed, rq.trial, Channel::particle_init, rq.level);
  Matrix X = initial_ensemble(rq.m0, rq.Q, rq.N, init);
  EnsembleStreams streams(rq.seed, rq.trial, rq.level);
  NoiseStream w(rq.seed, rq.trial, Channel::truth_obs, rq.level);
  const double sdt = std::sqrt(rq.grid.dt);
  if (m.d() == 1 && m.d_y() == 1 && rq.variant != Variant::transport) {
    ScalarEnsemble se(m, rq.variant, std::vector<double>(X.data(), X.data() + X.size()), rq.inflation);
    const double r1s = m.R1_sqrt()(0, 0);
    out.P.push_back(Matrix::Constant(1, 1, se.p_hat()));
    for (long k = 0; k < steps; ++k) {
      se.step(r1s * sdt * w.normal(), rq.grid.dt, streams);
      if (!se.finite()) {
        out.diverged = true;
        out.diverged_at = rq.grid.time(k + 1);
        return out;
      }
      if (record(k + 1)) out.P.push_back(Matrix::Constant(1, 1, se.p_hat()));
    }
    return out;
  }
  auto core = make_linear_core(m, rq.variant, rq.inflation);
  Vector dw(m.d_y());
  core.compute_stats(X);
  out.P.push_back(core.p_hat());
  for (long k = 0; k < steps; ++k) {
    w.fill_normal(dw.data(), static_cast<std::size_t>(dw.size()), sdt);
    core.step(X, m.R1_sqrt() * dw, rq.grid.dt, streams);
    if (!X.allFinite()) {
      out.diverged = true;
      out.diverged_at = rq.grid.time(k + 1);
      return out;
    }
    if (record(k + 1)) {
      core.compute_stats(X);
      out.P.push_back(core.p_hat());
    }
  }
  return out;
}

inline std::vector<double> recorded_times(const TimeGrid& g, long every) {
  std::vector<double> t;
  for (long k = 0; k <= g.steps; ++k)
    if (k % every == 0 || k == g.steps) t.push_back(g.time(k));
  return t;
}

inline std::vector<Matrix> riccati_on(const LinearGaussianModel& m, const Matrix& Q, const std::vector<double>& t) {
  auto rhs = [&m](double, const Matrix& P) { return ricc_drift(m, P); };
  auto ode = make_rk4(rhs, clamp_covariance, OdeOptions{});
  std::vector<Matrix> out;
  Matrix P = clamp_covariance(Q);
  double s = t.empty() ? 0.0 : t.front();
  for (double ti : t) {
    ode.advance(s, P, ti);
    s = ti;
    out.push_back(P);
  }
  return out;
}

// Long single-chain run of a scalar ensemble for stationary statistics.
struct StationaryOptions {
  Variant variant = Variant::vanilla;
  int N = 6;
  double dt = 1e-4;
  double burn_in = -1.0;    // default 20/sqrt(A^2+RS)
  double record_dt = -1.0;  // default burn_in/200
  long target = 10000;      // effective (decorrelated) samples
  double max_time = 1e6;
  double fixed_time = -1.0;  // run exactly this long after burn-in
  std::uint64_t seed = 1;
  std::uint32_t trial = 0;
  std::uint32_t level = 0;
};

struct StationaryResult {
  std::vector<double> series;  // P_hat every record_dt after burn-in
  double record_dt = 0.0;
  std::size_t spacing = 1;     // decorrelation spacing in records
  std::vector<double> thinned;
  double time_mean = 0.0;      // time average of P_hat over the sampled span
  double sampled_time = 0.0;
  long divergences = 0;
};

inline StationaryResult stationary_samples(const LinearGaussianModel& m, const StationaryOptions& o) {
  if (m.d() != 1 || m.d_y() != 1) throw Error("stationary_samples: scalar models only");
  const ScalarModel sm(m.A()(0, 0), m.R()(0, 0), m.S()(0, 0));
  const double rate = contraction_rate(sm);
  const double burn = o.burn_in > 0.0 ? o.burn_in : 20.0 / rate;
  StationaryResult res;
  res.record_dt = o.record_dt > 0.0 ? o.record_dt : burn / 200.0;
  const long every = std::max(1L, std::lround(res.record_dt / o.dt));
  res.record_dt = every * o.dt;
  const double start_var = equilibria(sm).rho_plus;
  const double r1s = m.R1_sqrt()(0, 0);
  const double sdt = std::sqrt(o.dt);

  std::uint32_t restart = 0;
  auto fresh = [&]() {
    std::uint32_t lvl = o.level + restart * 4096u;
    NoiseStream init(o.seed, o.trial, Channel::particle_init, lvl);
    Matrix X = initial_ensemble(Vector::Zero(1), Matrix::Constant(1, 1, start_var), o.N, init);
    return ScalarEnsemble(m, o.variant, std::vector<double>(X.data(), X.data() + X.size()));
  };
  ScalarEnsemble se = fresh();
  EnsembleStreams streams(o.seed, o.trial, o.level);
  NoiseStream w(o.seed, o.trial, Channel::truth_obs, o.level);
  double psum = 0.0;
  long psteps = 0;

  auto burn_in = [&]() {
    long n = std::lround(burn / o.dt);
    for (long k = 0; k < n; ++k) {
      se.step(r1s * sdt * w.normal(), o.dt, streams);
      if (!se.finite()) return false;
    }
    return true;
  };
  auto reset = [&]() {
    ++res.divergences;
    ++restart;
    if (restart > 100) throw NonFinite("stationary_samples: repeated divergence", psteps, res.sampled_time);
    se = fresh();
    streams = EnsembleStreams(o.seed, o.trial, o.level + restart * 4096u);
    w = NoiseStream(o.seed, o.trial, Channel::truth_obs, o.level + restart * 4096u);
  };
  while (!burn_in()) reset();

  auto run_records = [&](long records) {
    for (long r = 0; r < records; ++r) {
      for (long k = 0; k < every; ++k) {
        se.step(r1s * sdt * w.normal(), o.dt, streams);
        if (!se.finite()) {
          reset();
          while (!burn_in()) reset();
          k = -1;
          continue;
        }
        psum += se.p_hat();
        ++psteps;
      }
      res.series.push_back(se.p_hat());
    }
  };

  if (o.fixed_time > 0.0) {
    run_records(std::max(1L, static_cast<long>(std::ceil(o.fixed_time / res.record_dt))));
    res.spacing = decorrelation_spacing(res.series);
    res.thinned = thin(res.series, res.spacing);
    res.time_mean = psum / static_cast<double>(psteps);
    res.sampled_time = static_cast<double>(psteps) * o.dt;
    return res;
  }
  long pilot = std::max(2000L, o.target / 5);
  run_records(pilot);
  for (int round = 0; round < 50; ++round) {
    res.spacing = decorrelation_spacing(res.series);
    long eff = static_cast<long>(res.series.size() / res.spacing);
    if (eff >= o.target) break;
    if (static_cast<double>(res.series.size()) * res.record_dt > o.max_time) break;
    long need = static_cast<long>((o.target - eff) * res.spacing * 1.05) + 1;
    run_records(need);
  }
  res.thinned = thin(res.series, res.spacing);
  res.time_mean = psteps ? psum / static_cast<double>(psteps) : std::numeric_limits<double>::quiet_NaN();
  res.sampled_time = static_cast<double>(psteps) * o.dt;
  return res;
}

// ---- study kinds -----------------------------------------------------------------

namespace detail {

inline int workers_for(const StudySpec& s) { return s.workers > 0 ? s.workers : default_workers(); }

inline std::string path_in(const StudySpec& s, const std::string& name) {
  return (std::filesystem::path(s.output) / name).string();
}

inline long count_done(const std::vector<std::optional<PathResult>>& v) {
  return static_cast<long>(std::count_if(v.begin(), v.end(), [](const auto& x) { return x.has_value(); }));
}

inline PathRequest base_request(const StudySpec& s, Variant v, int N, std::uint32_t level) {
  PathRequest rq;
  rq.variant = v;
  rq.law = s.law;
  rq.N = N;
  rq.Q = s.Q_or_default();
  rq.m0 = s.m0_or_default();
  rq.grid = s.grid();
  rq.every = s.record_every;
  rq.seed = s.seed;
  rq.level = level;
  rq.scheme = s.scheme;
  return rq;
}

inline void study_bias(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  const int d = m.d();
  auto grid = s.grid();
  auto times = recorded_times(grid, s.record_every);
  auto phi = riccati_on(m, s.Q_or_default(), times);
  const double z = normal_quantile(s.confidence);
  bool all_hold = true;
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    for (std::size_t ni = 0; ni < s.N.size(); ++ni) {
      auto rq = base_request(s, s.variants[vi], s.N[ni], stream_level(vi, ni));
      auto res = run_trials(s.trials, workers_for(s), [&](long k) {
        auto r = rq;
        r.trial = static_cast<std::uint32_t>(k);
        return p_hat_path(m, r);
      });
      out.completed_trials += count_done(res);
      long diverged = 0;
      std::vector<const PathResult*> ok;
      for (const auto& r : res)
        if (r) {
          if (r->diverged)
            ++diverged;
          else
            ok.push_back(&*r);
        }
      for (std::size_t ti = 0; ti < times.size(); ++ti) {
        Matrix mean = Matrix::Zero(d, d);
        for (auto* r : ok) mean += r->P[ti];
        if (!ok.empty()) mean /= static_cast<double>(ok.size());
        Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(mean - phi[ti]));
        Vector v = es.eigenvectors().col(d - 1);
        std::vector<double> proj;
        for (auto* r : ok) proj.push_back(v.dot(r->P[ti] * v));
        PointSummary p;
        p.variant = to_string(s.variants[vi]);
        p.N = s.N[ni];
        p.t = times[ti];
        fill_point(p, proj);
        p.diverged = diverged;
        double target = v.dot(phi[ti] * v);
        double se = proj.size() > 1 ? std::sqrt(p.var / proj.size()) : 0.0;
        double lcb = p.mean - z * se;
        bool reject = lcb > target + 1e-12 * (1.0 + std::abs(target));
        all_hold = all_hold && !reject;
        p.extra = {{"phi", json_number(target)},
                   {"bias", json_number(p.mean - target)},
                   {"lower_confidence_bound", json_number(lcb)},
                   {"rejects_under_bias", reject}};
        out.per_point.push_back(p);
      }
    }
  }
  out.checks["under_bias_holds"] = all_hold;
  out.checks["confidence"] = s.confidence;
}

inline void study_fluctuation(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  auto grid = s.grid();
  Matrix phiT = riccati_at(m, s.Q_or_default(), grid.t_end() - grid.t0);
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    std::vector<double> lx, ly;
    for (std::size_t ni = 0; ni < s.N.size(); ++ni) {
      auto rq = base_request(s, s.variants[vi], s.N[ni], stream_level(vi, ni));
      rq.every = grid.steps;
      auto res = run_trials(s.trials, workers_for(s), [&](long k) {
        auto r = rq;
        r.trial = static_cast<std::uint32_t>(k);
        return p_hat_path(m, r);
      });
      out.completed_trials += count_done(res);
      std::vector<double> err;
      long diverged = 0;
      for (const auto& r : res)
        if (r) {
          if (r->diverged)
            ++diverged;
          else
            err.push_back((r->P.back() - phiT).norm());
        }
      PointSummary p;
      p.variant = std::string(s.law ? "law_" : "") + to_string(s.variants[vi]);
      p.N = s.N[ni];
      p.t = grid.t_end();
      fill_point(p, err);
      p.diverged = diverged;
      out.per_point.push_back(p);
      if (p.l2 > 0.0) {
        lx.push_back(std::log(double(p.N)));
        ly.push_back(std::log(p.l2));
      }
    }
    if (lx.size() >= 2) {
      auto f = slope_fit(lx, ly);
      json fj = {{"slope", f.slope}, {"stderr", f.stderr_slope}, {"intercept", f.intercept}};
      if (!out.fits.contains("slope")) {
        out.fits["slope"] = f.slope;
        out.fits["stderr"] = f.stderr_slope;
      }
      out.fits["by_variant"][std::string(s.law ? "law_" : "") + to_string(s.variants[vi])] = fj;
    }
  }
}

inline void study_clt(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  const ScalarModel sm(m.A()(0, 0), m.R()(0, 0), m.S()(0, 0));
  auto grid = s.grid();
  const double Q = s.Q ? (*s.Q)(0, 0) : 0.0;
  const double T = grid.t_end() - grid.t0;
  const double phiT = scalar_riccati(sm, Q, T);
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    const double kappa = kappa_of(s.variants[vi]);
    const double oracle = clt_variance_oracle(sm, kappa, Q, T);
    for (std::size_t ni = 0; ni < s.N.size(); ++ni) {
      auto rq = base_request(s, s.variants[vi], s.N[ni], stream_level(vi, ni));
      rq.Q = Matrix::Constant(1, 1, Q);
      rq.every = grid.steps;
      auto res = run_trials(s.trials, workers_for(s), [&](long k) {
        auto r = rq;
        r.trial = static_cast<std::uint32_t>(k);
        return p_hat_path(m, r);
      });
      out.completed_trials += count_done(res);
      std::vector<double> fl;
      long diverged = 0;
      const double rn = std::sqrt(double(s.N[ni]));
      for (const auto& r : res)
        if (r) {
          if (r->diverged)
            ++diverged;
          else
            fl.push_back(rn * (r->P.back()(0, 0) - phiT));
        }
      PointSummary p;
      p.variant = std::string(s.law ? "law_" : "") + to_string(s.variants[vi]);
      p.N = s.N[ni];
      p.t = grid.t_end();
      fill_point(p, fl);
      p.diverged = diverged;
      p.extra = {{"oracle_variance", oracle}, {"relative_error", json_number(p.var / oracle - 1.0)}};
      out.per_point.push_back(p);
    }
  }
}

inline StationaryOptions stationary_options(const StudySpec& s, Variant v, int N, std::uint32_t level, long target) {
  StationaryOptions o;
  o.variant = v;
  o.N = N;
  o.dt = s.dt;
  o.burn_in = s.burn_in;
  o.record_dt = s.record_dt;
  o.target = target;
  o.seed = s.seed;
  o.level = level;
  return o;
}

inline void study_invariant(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  const ScalarModel sm(m.A()(0, 0), m.R()(0, 0), m.S()(0, 0));
  const int N = s.N.front();
  std::vector<std::optional<InvariantDensity>> dens(2);
  std::vector<std::vector<double>> samples(2);
  bool all_pass = true;
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    Variant v = s.variants[vi];
    const int slot = v == Variant::vanilla ? 0 : 1;
    InvariantDensity g(sm, kappa_of(v), N);
    auto chains = run_trials(s.trials, workers_for(s), [&](long k) {
      auto o = stationary_options(s, v, N, stream_level(vi, 0), (s.samples + s.trials - 1) / s.trials);
      o.trial = static_cast<std::uint32_t>(k);
      return stationary_samples(m, o);
    });
    std::vector<double> all;
    long divergences = 0, done = 0;
    double span = 0.0;
    for (const auto& c : chains)
      if (c) {
        ++done;
        all.insert(all.end(), c->thinned.begin(), c->thinned.end());
        divergences += c->divergences;
        span += c->sampled_time;
      }
    out.completed_trials += done;
    PointSummary p;
    p.variant = to_string(v);
    p.N = N;
    p.t = span;
    fill_point(p, all);
    p.diverged = divergences;
    p.ks = all.empty() ? 1.0 : ks_distance(all, [&g](double x) { return g.cdf(x); });
    p.extra = {{"quadrature_mean", g.moment(1).value},
               {"spacing", chains.front() ? json(chains.front()->spacing * chains.front()->record_dt) : json(nullptr)}};
    all_pass = all_pass && p.ks < 0.02;
    out.per_point.push_back(p);
    dens[slot].emplace(g);
    samples[slot] = std::move(all);
  }
  out.checks["ks_below_0.02"] = all_pass;

  // figure data: closed forms and histogram densities
  double xmax = 0.0;
  for (int k = 0; k < 2; ++k)
    if (dens[k]) xmax = std::max(xmax, dens[k]->quantile(0.99));
  const int bins = 200;
  const double h = xmax / bins;
  CsvTable fig;
  fig.header = {"x", "density_vanilla", "density_deterministic", "empirical_vanilla", "empirical_deterministic"};
  std::vector<std::vector<double>> hist(2, std::vector<double>(bins, 0.0));
  for (int k = 0; k < 2; ++k) {
    for (double x : samples[k]) {
      auto b = static_cast<long>(x / h);
      if (b >= 0 && b < bins) hist[k][b] += 1.0;
    }
    if (!samples[k].empty())
      for (double& c : hist[k]) c /= static_cast<double>(samples[k].size()) * h;
  }
  for (int b = 0; b < bins; ++b) {
    double x = (b + 0.5) * h;
    std::vector<std::string> r{fmt_double(x)};
    for (int k = 0; k < 2; ++k) r.push_back(dens[k] ? fmt_double((*dens[k])(x)) : "nan");
    for (int k = 0; k < 2; ++k) r.push_back(samples[k].empty() ? "nan" : fmt_double(hist[k][b]));
    fig.rows.push_back(std::move(r));
  }
  write_csv(path_in(s, "fig2_densities.csv"), fig);
  out.files.push_back("fig2_densities.csv");
}

inline void write_fig1(const StudySpec& s, StudySummary& out) {
  CsvTable t;
  t.header = {"N", "n", "line", "exists"};
  for (int N = 1; N <= 50; ++N)
    for (int n = 1; n <= 10; ++n)
      t.rows.push_back({std::to_string(N), std::to_string(n), fmt_double((2.0 * n - 4.0) / N),
                        vanilla_moment_diverges(N, n) ? "0" : "1"});
  write_csv(path_in(s, "fig1_thresholds.csv"), t);
  out.files.push_back("fig1_thresholds.csv");
}

inline void study_moments(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  const int N = s.N.front();
  auto grid = s.grid();
  auto times = recorded_times(grid, s.record_every);
  const Matrix Q = s.Q ? *s.Q : Matrix::Zero(1, 1);
  auto phi = riccati_on(m, Q, times);
  CsvTable fig4, fig3;
  fig4.header = {"t", "variant", "mean", "variance"};
  for (int k = 3; k <= 9; ++k) fig4.header.push_back("m" + std::to_string(k));
  fig3.header = {"t", "phi"};
  std::vector<std::vector<const PathResult*>> shown(s.variants.size());
  std::vector<std::vector<std::optional<PathResult>>> keep(s.variants.size());
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    auto rq = base_request(s, s.variants[vi], N, stream_level(vi, 0));
    rq.Q = Q;
    keep[vi] = run_trials(s.trials, workers_for(s), [&](long k) {
      auto r = rq;
      r.trial = static_cast<std::uint32_t>(k);
      return p_hat_path(m, r);
    });
    out.completed_trials += count_done(keep[vi]);
    std::vector<const PathResult*> ok;
    long diverged = 0;
    for (const auto& r : keep[vi])
      if (r) {
        if (r->diverged)
          ++diverged;
        else
          ok.push_back(&*r);
      }
    for (std::size_t ti = 0; ti < times.size(); ++ti) {
      std::vector<double> x;
      for (auto* r : ok) x.push_back(r->P[ti](0, 0));
      PointSummary p;
      p.variant = to_string(s.variants[vi]);
      p.N = N;
      p.t = times[ti];
      fill_point(p, x);
      p.diverged = diverged;
      p.extra = {{"phi", phi[ti](0, 0)}};
      std::vector<std::string> row{fmt_double(p.t), p.variant, fmt_double(p.mean), fmt_double(p.var)};
      for (int k = 0; k < 7; ++k)
        row.push_back(k < static_cast<int>(p.std_moments.size()) ? fmt_double(p.std_moments[k]) : "nan");
      fig4.rows.push_back(std::move(row));
      out.per_point.push_back(std::move(p));
    }
    for (std::size_t k = 0; k < ok.size() && static_cast<int>(k) < s.paths; ++k) {
      shown[vi].push_back(ok[k]);
      fig3.header.push_back(to_string(s.variants[vi]) + "_" + std::to_string(k + 1));
    }
  }
  for (std::size_t ti = 0; ti < times.size(); ++ti) {
    std::vector<std::string> row{fmt_double(times[ti]), fmt_double(phi[ti](0, 0))};
    for (const auto& sv : shown)
      for (auto* r : sv) row.push_back(fmt_double(r->P[ti](0, 0)));
    fig3.rows.push_back(std::move(row));
  }
  write_csv(path_in(s, "fig4_moments_flow.csv"), fig4);
  write_csv(path_in(s, "fig3_riccati_paths.csv"), fig3);
  out.files.push_back("fig4_moments_flow.csv");
  out.files.push_back("fig3_riccati_paths.csv");
  write_fig1(s, out);

  if (s.stationary_samples > 0) {
    StudySpec st = s;
    if (st.dt > 1e-4) st.dt = 1e-4;
    for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
      auto o = stationary_options(st, s.variants[vi], N, stream_level(vi, 1), s.stationary_samples);
      auto res = stationary_samples(m, o);
      json ratios = json::array();
      for (int p = 1; p <= 9; ++p) {
        if (static_cast<long>(res.thinned.size()) < s.batch[1]) break;
        auto c = moment_stability(res.thinned, static_cast<std::size_t>(s.batch[0]),
                                  static_cast<std::size_t>(s.batch[1]), p);
        ratios.push_back({{"order", p}, {"ratio", json_number(c.ratio)}, {"stable", c.stable}});
      }
      PointSummary p;
      p.variant = to_string(s.variants[vi]) + "_stationary";
      p.N = N;
      p.t = res.sampled_time;
      fill_point(p, res.thinned);
      p.diverged = res.divergences;
      double hill = std::numeric_limits<double>::quiet_NaN();
      if (static_cast<long>(res.thinned.size()) > 10 * s.hill_k)
        hill = hill_tail_index(res.thinned, static_cast<std::size_t>(s.hill_k));
      p.extra = {{"hill_index", json_number(hill)}, {"stability", ratios}, {"spacing", res.spacing * res.record_dt}};
      out.per_point.push_back(std::move(p));
    }
  }
}

inline void study_lyapunov(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  const ScalarModel sm(m.A()(0, 0), m.R()(0, 0), m.S()(0, 0));
  bool all_ok = true;
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    const double kappa = kappa_of(s.variants[vi]);
    for (std::size_t ni = 0; ni < s.N.size(); ++ni) {
      const int N = s.N[ni];
      const double quad = lyapunov_exponent(sm, kappa, N);
      const double horizon = s.T_end - s.t0;
      auto chains = run_trials(s.trials, workers_for(s), [&](long k) {
        auto o = stationary_options(s, s.variants[vi], N, stream_level(vi, ni), 1);
        o.trial = static_cast<std::uint32_t>(k);
        o.fixed_time = horizon;
        o.record_dt = std::max(s.dt, horizon / 2000.0);
        return stationary_samples(m, o);
      });
      std::vector<double> avg;
      long div = 0;
      for (const auto& c : chains)
        if (c) {
          avg.push_back(sm.A - sm.S * c->time_mean);
          div += c->divergences;
        }
      out.completed_trials += static_cast<long>(avg.size());
      PointSummary p;
      p.variant = to_string(s.variants[vi]);
      p.N = N;
      p.t = horizon;
      fill_point(p, avg);
      p.diverged = div;
      double rel = std::abs(p.mean / quad - 1.0);
      p.extra = {{"quadrature", quad}, {"relative_error", rel}};
      if (N > 4) {
        auto b = lyapunov_bounds(sm, kappa, N);
        bool inside = quad >= b.lower && quad <= b.upper;
        p.extra["bound_lower"] = b.lower;
        p.extra["bound_upper"] = b.upper;
        p.extra["within_bounds"] = inside;
        all_ok = all_ok && inside;
      }
      all_ok = all_ok && rel < 0.02;
      out.per_point.push_back(std::move(p));
    }
  }
  out.checks["lyapunov_ok"] = all_ok;
}

inline void study_inflation(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  const int d = m.d();
  auto grid = s.grid();
  Matrix Q = s.Q_or_default();
  Matrix T = s.T ? *s.T : Matrix::Identity(d, d);
  auto base = riccati_flow(m, Q, grid);
  bool all_ok = true;
  for (double kappa : {1.0, 0.0}) {
    for (double xi : s.xi) {
      auto infl = inflated_riccati_flow(m, Q, kappa, xi, T, grid);
      double margin = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < base.size(); ++k) {
        Matrix diff = kappa == 1.0 ? Matrix(infl[k].P - base[k].P) : Matrix(base[k].P - infl[k].P);
        margin = std::min(margin, min_eigenvalue(symmetrize(diff)));
      }
      bool holds = margin >= -1e-8;
      all_ok = all_ok && holds;
      PointSummary p;
      p.variant = kappa == 1.0 ? "vanilla" : "deterministic";
      p.t = grid.t_end();
      p.mean = infl.back().P.trace();
      p.extra = {{"xi", xi}, {"kappa", kappa}, {"min_margin", margin}, {"ordering_holds", holds},
                 {"phi_trace", base.back().P.trace()}};
      out.per_point.push_back(std::move(p));
      ++out.completed_trials;
    }
  }
  out.checks["inflation_ordering_holds"] = all_ok;
}

inline void study_semigroup(const StudySpec& s, StudySummary& out) {
  const auto& m = *s.model;
  Matrix Pinf = solve_are(m).P;
  const double threshold = 0.5 * log_norm(m.A() - Pinf * m.S());
  auto grid = s.grid();
  const double horizon = grid.t_end() - grid.t0;
  bool all_ok = true;
  for (std::size_t vi = 0; vi < s.variants.size(); ++vi) {
    for (std::size_t ni = 0; ni < s.N.size(); ++ni) {
      auto rq = base_request(s, s.variants[vi], s.N[ni], stream_level(vi, ni));
      rq.every = 1;
      auto res = run_trials(s.trials, workers_for(s), [&](long k) {
        auto r = rq;
        r.trial = static_cast<std::uint32_t>(k);
        auto path = p_hat_path(m, r);
        if (path.diverged) return std::optional<double>();
        auto sg = stochastic_semigroup(m, path.P, grid.dt, 0, path.P.size() - 1, std::nullopt);
        return std::optional<double>(sg.lyapunov);
      });
      std::vector<double> ex;
      long div = 0;
      for (const auto& r : res)
        if (r) {
          if (*r)
            ex.push_back(**r);
          else
            ++div;
        }
      out.completed_trials += static_cast<long>(ex.size()) + div;
      PointSummary p;
      p.variant = to_string(s.variants[vi]);
      p.N = s.N[ni];
      p.t = horizon;
      fill_point(p, ex);
      p.diverged = div;
      long below = std::count_if(ex.begin(), ex.end(), [&](double v) { return v < threshold; });
      double freq = ex.empty() ? 0.0 : double(below) / double(ex.size() + div);
      p.extra = {{"threshold", threshold}, {"frequency_below", freq}};
      all_ok = all_ok && freq >= 0.9;
      out.per_point.push_back(std::move(p));
    }
  }
  out.checks["contraction_frequency_at_least_0.9"] = all_ok;
}

}  // namespace detail

inline void write_study_outputs(const StudySpec& s, StudySummary& sum) {
  write_csv(detail::path_in(s, "summary.csv"), per_point_table(sum));
  sum.files.push_back("summary.csv");
  sum.files.push_back("summary.json");
  std::ofstream os(detail::path_in(s, "summary.json"));
  if (!os) throw Error("cannot write summary.json");
  os << to_json(sum).dump(2) << "\n";
  if (sum.interrupted) {
    std::ofstream ms(detail::path_in(s, "manifest.json"));
    ms << json{{"interrupted", true},
               {"requested_trials", sum.requested_trials},
               {"completed_trials", sum.completed_trials}}
              .dump(2)
       << "\n";
  }
}

inline StudySummary run_study(const StudySpec& s) {
  std::filesystem::create_directories(s.output);
  StudySummary sum;
  sum.spec_echo = s.echo;
  sum.requested_trials = s.kind == StudyKind::inflation_sweep
                             ? 2 * static_cast<long>(s.xi.size())
                             : s.trials * static_cast<long>(s.variants.size() * s.N.size());
  switch (s.kind) {
    case StudyKind::bias: detail::study_bias(s, sum); break;
    case StudyKind::fluctuation_rate: detail::study_fluctuation(s, sum); break;
    case StudyKind::clt_variance: detail::study_clt(s, sum); break;
    case StudyKind::invariant_ks: detail::study_invariant(s, sum); break;
    case StudyKind::moments_flow: detail::study_moments(s, sum); break;
    case StudyKind::lyapunov: detail::study_lyapunov(s, sum); break;
    case StudyKind::inflation_sweep: detail::study_inflation(s, sum); break;
    case StudyKind::semigroup_contraction: detail::study_semigroup(s, sum); break;
  }
  sum.interrupted = interrupt_flag().load();
  write_study_outputs(s, sum);
  return sum;
}

}  // namespace kbflow
