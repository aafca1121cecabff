#pragma once

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kbflow/ensemble.hpp"
#include "kbflow/io.hpp"
#include "kbflow/kalman.hpp"
#include "kbflow/model.hpp"
#include "kbflow/scalar.hpp"
#include "kbflow/study.hpp"

namespace kbflow::cli {

using nlohmann::json;

enum ExitCode : int {
  ok = 0,
  failure = 1,
  bad_input = 2,
  rank_failure = 3,
  engine_error = 4,
};

struct GlobalFlags {
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  std::optional<std::string> scheme;
  std::optional<double> dt;
};

// ---- run config -----------------------------------------------------------------

struct RunConfig {
  LinearGaussianModel model;
  std::string variant = "kalman";  // kalman | vanilla | deterministic | transport
  bool law = false;
  int N = 10;
  double xi = 0.0;
  std::optional<Matrix> T;
  double t0 = 0.0, dt = 1e-3, T_end = 1.0;
  std::uint64_t seed = 1;
  std::uint32_t trial = 0;
  std::optional<SchemeKind> scheme;
  std::string output = "out";
  std::optional<Matrix> Q;
  std::optional<Vector> m0;
  long record_every = 1;
  bool detached = false;
  bool exact_moments = false;
  json echo;
};

struct ConfigError : Error {
  using Error::Error;
};

inline RunConfig run_config_from_json(const json& j, const std::string& base_dir = ".") {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::vector<std::string> allowed{"model", "variant", "kappa", "mode", "N", "xi", "T", "grid",
                                                  "seed", "trial", "scheme", "output", "Q", "m0", "record_every",
                                                  "detached", "exact_moments"};
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown key '" + it.key() + "' in run config");
  }
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_relative()) path = std::filesystem::path(base_dir) / path;
    if (!std::filesystem::exists(path)) throw ConfigError("referenced file does not exist: " + path.string());
    return path.string();
  };
  RunConfig c;
  c.echo = j;
  try {
    if (!j.contains("model")) throw ConfigError("run config needs 'model'");
    c.model = j["model"].is_string() ? load_model(resolve(j["model"].get<std::string>())) : model_from_json(j["model"]);
    const int d = c.model.d();
    if (j.contains("variant") && j.contains("kappa")) throw ConfigError("give either 'variant' or 'kappa'");
    if (j.contains("variant")) {
      c.variant = j["variant"].get<std::string>();
      if (c.variant != "kalman") c.variant = to_string(variant_from_string(c.variant));
    }
    if (j.contains("kappa")) {
      double k = j["kappa"].get<double>();
      if (k != 0.0 && k != 1.0) throw ConfigError("kappa must be 0 or 1");
      c.variant = k == 1.0 ? "vanilla" : "deterministic";
    }
    if (j.contains("mode")) {
      auto m = j["mode"].get<std::string>();
      if (m != "particle" && m != "law") throw ConfigError("mode must be 'particle' or 'law'");
      c.law = m == "law";
    }
    if (j.contains("N")) c.N = j["N"].get<int>();
    if (j.contains("xi")) c.xi = j["xi"].get<double>();
    if (j.contains("T")) {
      json tj = j["T"];
      if (tj.is_string()) {
        std::ifstream in(resolve(tj.get<std::string>()));
        tj = json::parse(in);
      }
      c.T = tj.is_number() ? Matrix::Constant(1, 1, tj.get<double>()) : matrix_from_json(tj, "T");
      if (c.T->rows() != d || c.T->cols() != d) throw ConfigError("T has the wrong shape");
    }
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      for (auto it = g.begin(); it != g.end(); ++it)
        if (it.key() != "t0" && it.key() != "dt" && it.key() != "T_end")
          throw ConfigError("unknown key '" + it.key() + "' in grid");
      c.t0 = g.value("t0", c.t0);
      c.dt = g.value("dt", c.dt);
      c.T_end = g.value("T_end", c.T_end);
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("trial")) c.trial = j["trial"].get<std::uint32_t>();
    if (j.contains("scheme")) c.scheme = scheme_from_string(j["scheme"].get<std::string>());
    if (j.contains("output")) c.output = j["output"].get<std::string>();
    if (j.contains("Q")) {
      c.Q = j["Q"].is_number() ? Matrix::Constant(1, 1, j["Q"].get<double>()) : matrix_from_json(j["Q"], "Q");
      if (c.Q->rows() != d || c.Q->cols() != d) throw ConfigError("Q has the wrong shape");
    }
    if (j.contains("m0")) {
      auto v = j["m0"].get<std::vector<double>>();
      if (static_cast<int>(v.size()) != d) throw ConfigError("m0 has the wrong length");
      c.m0 = Eigen::Map<Vector>(v.data(), d);
    }
    if (j.contains("record_every")) c.record_every = j["record_every"].get<long>();
    if (j.contains("detached")) c.detached = j["detached"].get<bool>();
    if (j.contains("exact_moments")) c.exact_moments = j["exact_moments"].get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  } catch (const InvalidModel& e) {
    throw ConfigError(std::string("run config model: ") + e.what());
  }
  if (!(c.dt > 0.0)) throw ConfigError("grid.dt must be positive");
  if (!(c.T_end > c.t0)) throw ConfigError("grid.T_end must exceed grid.t0");
  if (c.N < 1) throw ConfigError("N must be at least 1");
  if (c.xi < 0.0) throw ConfigError("xi must be non-negative");
  if (c.record_every < 1) throw ConfigError("record_every must be positive");
  if (c.law && (c.variant == "kalman" || c.variant == "transport"))
    throw ConfigError("law mode needs the vanilla or deterministic variant");
  if (c.variant == "transport" && c.xi > 0.0) throw ConfigError("transport variant does not take inflation");
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config parse error: ") + e.what());
  }
  return run_config_from_json(j, std::filesystem::path(path).parent_path().string());
}

inline std::optional<Inflation> inflation_of(const RunConfig& c) {
  if (c.xi <= 0.0) return std::nullopt;
  return Inflation{c.xi, c.T ? *c.T : Matrix::Identity(c.model.d(), c.model.d())};
}

inline TrajectoryRecord execute_run(const RunConfig& c) {
  const int d = c.model.d();
  const Matrix Q = c.Q ? *c.Q : Matrix::Identity(d, d);
  const Vector m0 = c.m0 ? *c.m0 : Vector::Zero(d);
  const auto grid = TimeGrid::over(c.t0, c.T_end - c.t0, c.dt);
  TruthConfig truth;
  truth.detached = c.detached;
  if (c.variant == "kalman") {
    auto run = kalman_run(c.model, m0, Q, c.seed, grid, truth, c.trial);
    auto rec = to_record(run, c.model);
    TrajectoryRecord thin;
    thin.variant = rec.variant;
    thin.N = 0;
    thin.xi = 0.0;
    thin.kappa = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t k = 0; k < rec.size(); ++k) {
      if (static_cast<long>(k) % c.record_every != 0 && k + 1 != rec.size()) continue;
      thin.t.push_back(rec.t[k]);
      thin.X.push_back(rec.X[k]);
      thin.Z.push_back(rec.Z[k]);
      thin.P.push_back(rec.P[k]);
      thin.mu_closed_loop.push_back(rec.mu_closed_loop[k]);
    }
    return thin;
  }
  Variant v = variant_from_string(c.variant);
  if (c.law) {
    LawLevelOptions lo;
    lo.seed = c.seed;
    lo.trial = c.trial;
    lo.scheme = c.scheme;
    lo.inflation = inflation_of(c);
    lo.truth = truth;
    lo.record_every = c.record_every;
    return law_level_run(c.model, kappa_of(v), c.N, Q, m0, grid, lo);
  }
  EnsembleRunOptions eo;
  eo.seed = c.seed;
  eo.trial = c.trial;
  eo.m0 = m0;
  eo.Q = Q;
  eo.exact_moments = c.exact_moments;
  eo.inflation = inflation_of(c);
  eo.truth = truth;
  eo.record_every = c.record_every;
  return run_enkf(c.model, v, c.N, grid, eo);
}

inline json run_summary(const RunConfig& c, const TrajectoryRecord& rec) {
  json j;
  j["config"] = c.echo;
  j["variant"] = rec.variant;
  j["N"] = rec.N;
  j["records"] = rec.size();
  if (rec.size()) {
    j["t_final"] = rec.t.back();
    j["P_final"] = matrix_to_json(rec.P.back());
    j["X_final"] = matrix_to_json(rec.X.back());
    j["mu_closed_loop_final"] = json_number(rec.mu_closed_loop.back());
  }
  j["diverged_at"] = rec.diverged ? json(rec.diverged->t) : json(nullptr);
  return j;
}

inline void write_gnuplot_trajectory(const std::string& dir, int d) {
  std::ofstream gp(std::filesystem::path(dir) / "plot.gp");
  gp << "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\n";
  gp << "set multiplot layout 2,1\nplot";
  for (int i = 1; i <= d; ++i)
    gp << (i > 1 ? "," : "") << " 'trajectory.csv' using 1:" << (1 + i) << " with lines";
  gp << "\nplot";
  int col = 2 + 2 * d, first = 1;
  for (int i = 0; i < d; ++i)
    for (int k = i; k < d; ++k, ++col) {
      if (i == k) gp << (first ? "" : ",") << " 'trajectory.csv' using 1:" << col << " with lines";
      if (i == k) first = 0;
    }
  gp << "\nunset multiplot\n";
}

inline void write_gnuplot_study(const std::string& dir, const std::vector<std::string>& files) {
  std::ofstream gp(std::filesystem::path(dir) / "plot.gp");
  gp << "set datafile separator ','\nset key autotitle columnhead\n";
  for (const auto& f : files) {
    if (f == "fig2_densities.csv")
      gp << "set xlabel 'x'\nplot for [c=2:5] 'fig2_densities.csv' using 1:c with lines\npause -1\n";
    if (f == "fig3_riccati_paths.csv")
      gp << "set xlabel 't'\nplot for [c=2:*] 'fig3_riccati_paths.csv' using 1:c with lines notitle\npause -1\n";
    if (f == "fig1_thresholds.csv")
      gp << "set xlabel 'N'\nset ylabel 'n'\nplot 'fig1_thresholds.csv' using 1:($4==1?$2:1/0) with points "
            "title 'moment exists'\npause -1\n";
    if (f == "fig4_moments_flow.csv")
      gp << "set xlabel 't'\nplot for [c=3:11] 'fig4_moments_flow.csv' using 1:c with lines\npause -1\n";
  }
}

// ---- commands --------------------------------------------------------------------

inline int cmd_model_check(const std::string& path, double tau, std::ostream& out, std::ostream& err) {
  LinearGaussianModel m;
  try {
    m = load_model(path);
  } catch (const std::exception& e) {
    err << "invalid model: " << e.what() << "\n";
    return bad_input;
  }
  const bool ctrl = check_controllability(m);
  const bool obs = check_observability(m);
  out << "d: " << m.d() << "\nd_y: " << m.d_y() << "\n";
  out << "controllable: " << (ctrl ? "yes" : "no") << "\n";
  out << "observable: " << (obs ? "yes" : "no") << "\n";
  try {
    auto g = gramians(m, tau);
    out << "gramian_tau: " << fmt_double(tau) << "\n";
    out << "O_tau_min_eig: " << fmt_double(min_eigenvalue(g.O_tau)) << "\n";
    out << "C_tau_min_eig: " << fmt_double(min_eigenvalue(g.C_tau)) << "\n";
    out << "O_tau_norm: " << fmt_double(operator_norm(g.O_tau)) << "\n";
    out << "C_tau_norm: " << fmt_double(operator_norm(g.C_tau)) << "\n";
  } catch (const std::exception& e) {
    out << "gramians: " << e.what() << "\n";
  }
  if (!ctrl || !obs) {
    if (!ctrl) err << "rank condition failed: controllability (R^{1/2}, A) rank < d\n";
    if (!obs) err << "rank condition failed: observability (A, H) rank < d\n";
    return rank_failure;
  }
  try {
    auto are = solve_are(m);
    Matrix F = m.A() - are.P * m.S();
    out << "P_inf: " << matrix_to_json(are.P).dump() << "\n";
    out << "ricc_residual: " << fmt_double(ricc_residual(m, are.P)) << "\n";
    out << "absc_closed_loop: " << fmt_double(spectral_abscissa(F)) << "\n";
    out << "mu_closed_loop: " << fmt_double(log_norm(F)) << "\n";
  } catch (const std::exception& e) {
    err << "algebraic Riccati solve failed: " << e.what() << "\n";
    return failure;
  }
  return ok;
}

inline int cmd_run(const std::string& path, const GlobalFlags& g, bool plot, std::ostream& out,
                   std::ostream& err) {
  RunConfig c;
  try {
    c = load_run_config(path);
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.output = *g.out;
    if (g.dt) {
      if (!(*g.dt > 0.0)) throw ConfigError("--dt must be positive");
      c.dt = *g.dt;
    }
    if (g.scheme) c.scheme = scheme_from_string(*g.scheme);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return bad_input;
  }
  TrajectoryRecord rec;
  try {
    rec = execute_run(c);
  } catch (const NonFinite& e) {
    err << "non-finite state in exact filter: " << e.what() << "\n";
    return engine_error;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return failure;
  }
  std::filesystem::create_directories(c.output);
  write_trajectory_csv((std::filesystem::path(c.output) / "trajectory.csv").string(), rec);
  std::ofstream(std::filesystem::path(c.output) / "summary.json") << run_summary(c, rec).dump(2) << "\n";
  if (plot) write_gnuplot_trajectory(c.output, c.model.d());
  out << "wrote " << (std::filesystem::path(c.output) / "trajectory.csv").string() << "\n";
  if (rec.diverged) out << "diverged_at: " << fmt_double(rec.diverged->t) << "\n";
  return ok;
}

inline int cmd_study(const std::string& path, const GlobalFlags& g, bool plot, std::ostream& out,
                     std::ostream& err) {
  StudySpec s;
  try {
    s = load_study_spec(path);
    if (g.seed) s.seed = *g.seed;
    if (g.workers) s.workers = *g.workers;
    if (g.out) s.output = *g.out;
    if (g.dt) {
      if (!(*g.dt > 0.0)) throw SpecError("--dt must be positive");
      s.dt = *g.dt;
    }
    if (g.scheme) s.scheme = scheme_from_string(*g.scheme);
  } catch (const std::exception& e) {
    err << "study spec error: " << e.what() << "\n";
    return bad_input;
  }
  StudySummary sum;
  try {
    sum = run_study(s);
  } catch (const std::exception& e) {
    err << "study failed: " << e.what() << "\n";
    return failure;
  }
  if (plot) write_gnuplot_study(s.output, sum.files);
  out << "study " << to_string(s.kind) << ": " << sum.completed_trials << "/" << sum.requested_trials
      << " trials, output in " << s.output << "\n";
  for (auto it = sum.checks.begin(); it != sum.checks.end(); ++it) out << it.key() << ": " << it.value() << "\n";
  if (sum.fits.contains("slope")) out << "slope: " << sum.fits["slope"] << " +- " << sum.fits["stderr"] << "\n";
  if (sum.interrupted) {
    err << "interrupted; partial results written\n";
    return failure;
  }
  return ok;
}

struct ScalarArgs {
  double A = 0.0, R = 1.0, S = 1.0;
  double kappa = 1.0;
  int N = 6;
  int points = 400;
  double x_max = -1.0;
  int n_max = 10;
  int N_max = 50;
};

inline void emit(const CsvTable& t, const std::optional<std::string>& path, std::ostream& out) {
  if (path) {
    std::filesystem::path p(*path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    write_csv(p.string(), t);
    return;
  }
  for (std::size_t i = 0; i < t.header.size(); ++i) out << (i ? "," : "") << t.header[i];
  out << "\n";
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << "\n";
  }
}

inline int cmd_scalar(const std::string& what, const ScalarArgs& a, const std::optional<std::string>& path,
                      std::ostream& out, std::ostream& err) {
  try {
    ScalarModel m(a.A, a.R, a.S);
    if (a.kappa != 0.0 && a.kappa != 1.0) throw Error("kappa must be 0 or 1");
    CsvTable t;
    if (what == "density") {
      InvariantDensity g(m, a.kappa, a.N);
      double xmax = a.x_max > 0.0 ? a.x_max : g.quantile(0.995);
      t.header = {"x", "density"};
      for (int i = 1; i <= a.points; ++i) {
        double x = xmax * i / a.points;
        t.rows.push_back({fmt_double(x), fmt_double(g(x))});
      }
    } else if (what == "moments") {
      t.header = {"n", "moment"};
      for (int n = 1; n <= a.n_max; ++n) {
        auto r = invariant_moment(m, a.kappa, a.N, n);
        t.rows.push_back({std::to_string(n), r.divergent ? "Divergent" : fmt_double(r.value)});
      }
    } else if (what == "lyapunov") {
      t.header = {"N", "kappa", "lyapunov", "bound_lower", "bound_upper"};
      double v = lyapunov_exponent(m, a.kappa, a.N);
      std::string lo = "nan", hi = "nan";
      if (a.N > 4) {
        auto b = lyapunov_bounds(m, a.kappa, a.N);
        lo = fmt_double(b.lower);
        hi = fmt_double(b.upper);
      }
      t.rows.push_back({std::to_string(a.N), fmt_double(a.kappa), fmt_double(v), lo, hi});
    } else if (what == "threshold") {
      t.header = {"N", "n", "line", "exists"};
      for (int N = 1; N <= a.N_max; ++N)
        for (int n = 1; n <= a.n_max; ++n)
          t.rows.push_back({std::to_string(N), std::to_string(n), fmt_double((2.0 * n - 4.0) / N),
                            vanilla_moment_diverges(N, n) ? "0" : "1"});
    } else {
      err << "unknown scalar command " << what << "\n";
      return bad_input;
    }
    emit(t, path, out);
  } catch (const InvalidModel& e) {
    err << "invalid scalar model: " << e.what() << "\n";
    return bad_input;
  } catch (const std::exception& e) {
    err << "scalar " << what << " failed: " << e.what() << "\n";
    return failure;
  }
  return ok;
}

// ---- entry --------------------------------------------------------------------------

inline void on_sigint(int) { interrupt_flag().store(true); }

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Continuous-time ensemble Kalman-Bucy filters: runs, studies and scalar closed forms"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags g;
  std::uint64_t seed = 0;
  int workers = 0;
  std::string outdir, scheme;
  double dt = 0.0;
  bool plot = false;
  auto* o_seed = app.add_option("--seed", seed, "master seed");
  auto* o_workers = app.add_option("--workers", workers, "worker pool cap (default KBFLOW_WORKERS or all cores)");
  auto* o_out = app.add_option("--out", outdir, "output directory or file");
  auto* o_scheme = app.add_option("--scheme", scheme, "euler_maruyama | tamed_euler");
  auto* o_dt = app.add_option("--dt", dt, "time step override");
  app.add_flag("--plot", plot, "also write a gnuplot script");
  for (auto* o : {o_seed, o_workers, o_out, o_scheme, o_dt}) o->configurable(false);

  auto* model = app.add_subcommand("model", "model utilities");
  model->require_subcommand(1);
  auto* check = model->add_subcommand("check", "rank conditions, Gramians and the algebraic Riccati solution");
  std::string model_path;
  double tau = 1.0;
  check->add_option("path", model_path, "model JSON")->required();
  check->add_option("--tau", tau, "Gramian horizon");

  auto* run = app.add_subcommand("run", "single Kalman-Bucy or ensemble run");
  std::string run_path;
  run->add_option("config", run_path, "run config JSON")->required();

  auto* study = app.add_subcommand("study", "Monte Carlo study");
  std::string study_path;
  study->add_option("spec", study_path, "study spec JSON")->required();

  auto* scalar = app.add_subcommand("scalar", "scalar closed forms");
  scalar->require_subcommand(1);
  ScalarArgs sa;
  std::string scalar_cmd;
  for (const char* name : {"density", "moments", "lyapunov", "threshold"}) {
    auto* sc = scalar->add_subcommand(name, std::string("scalar ") + name);
    sc->add_option("-A", sa.A, "drift");
    sc->add_option("-R", sa.R, "signal noise");
    sc->add_option("-S", sa.S, "sensor precision");
    sc->add_option("--kappa", sa.kappa, "1 vanilla, 0 deterministic");
    sc->add_option("-N", sa.N, "ensemble size parameter");
    sc->add_option("--points", sa.points, "density grid points");
    sc->add_option("--xmax", sa.x_max, "density grid upper end");
    sc->add_option("--nmax", sa.n_max, "largest moment order");
    sc->add_option("--Nmax", sa.N_max, "largest N in the threshold table");
    sc->callback([&scalar_cmd, name] { scalar_cmd = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? ok : bad_input;
  }
  if (*o_seed) g.seed = seed;
  if (*o_workers) g.workers = workers;
  if (*o_out) g.out = outdir;
  if (*o_scheme) g.scheme = scheme;
  if (*o_dt) g.dt = dt;
  if (g.workers && *g.workers < 1) {
    err << "--workers must be positive\n";
    return bad_input;
  }

  if (*check) return cmd_model_check(model_path, tau, out, err);
  if (*run) return cmd_run(run_path, g, plot, out, err);
  if (*study) {
    auto prev = std::signal(SIGINT, on_sigint);
    int rc = cmd_study(study_path, g, plot, out, err);
    std::signal(SIGINT, prev);
    return rc;
  }
  if (*scalar) return cmd_scalar(scalar_cmd, sa, g.out, out, err);
  return bad_input;
}

}  // namespace kbflow::cli
