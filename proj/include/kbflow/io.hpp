#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "kbflow/ensemble.hpp"
#include "kbflow/errors.hpp"

namespace kbflow {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw Error("csv: bad number '" + s + "'");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<std::string> trajectory_header(int d) {
  std::vector<std::string> h{"t"};
  for (int i = 1; i <= d; ++i) h.push_back("X_" + std::to_string(i));
  for (int i = 1; i <= d; ++i) h.push_back("Z_" + std::to_string(i));
  for (int i = 1; i <= d; ++i)
    for (int j = i; j <= d; ++j) h.push_back("P_" + std::to_string(i) + std::to_string(j));
  for (const char* c : {"variant", "N", "xi", "kappa", "mu_closed_loop", "diverged_at"}) h.emplace_back(c);
  return h;
}

inline void write_trajectory_csv(std::ostream& os, const TrajectoryRecord& rec) {
  const int d = rec.X.empty() ? 0 : static_cast<int>(rec.X.front().size());
  auto header = trajectory_header(d);
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  std::string div = rec.diverged ? fmt_double(rec.diverged->t) : "";
  for (std::size_t k = 0; k < rec.size(); ++k) {
    os << fmt_double(rec.t[k]);
    for (int i = 0; i < d; ++i) os << "," << fmt_double(rec.X[k](i));
    for (int i = 0; i < d; ++i) os << "," << fmt_double(rec.Z[k](i));
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) os << "," << fmt_double(rec.P[k](i, j));
    os << "," << rec.variant << "," << rec.N << "," << fmt_double(rec.xi) << "," << fmt_double(rec.kappa) << ","
       << fmt_double(rec.mu_closed_loop[k]) << "," << div << "\n";
  }
}

inline void write_trajectory_csv(const std::string& path, const TrajectoryRecord& rec) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_trajectory_csv(os, rec);
}

inline TrajectoryRecord read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("trajectory csv: empty input");
  auto header = split_csv_line(line);
  int d = 0;
  for (const auto& h : header)
    if (h.rfind("X_", 0) == 0) ++d;
  if (header != trajectory_header(d)) throw Error("trajectory csv: unexpected header");
  TrajectoryRecord rec;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != header.size()) throw Error("trajectory csv: wrong field count");
    std::size_t c = 0;
    rec.t.push_back(parse_double(f[c++]));
    Vector X(d), Z(d);
    for (int i = 0; i < d; ++i) X(i) = parse_double(f[c++]);
    for (int i = 0; i < d; ++i) Z(i) = parse_double(f[c++]);
    Matrix P(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) P(i, j) = P(j, i) = parse_double(f[c++]);
    rec.X.push_back(X);
    rec.Z.push_back(Z);
    rec.P.push_back(P);
    rec.variant = f[c++];
    rec.N = std::stoi(f[c++]);
    rec.xi = parse_double(f[c++]);
    rec.kappa = parse_double(f[c++]);
    rec.mu_closed_loop.push_back(parse_double(f[c++]));
    if (!f[c].empty() && !rec.diverged) {
      rec.diverged = Divergence{};
      rec.diverged->t = parse_double(f[c]);
      rec.diverged->variant = rec.variant;
      rec.diverged->N = rec.N;
    }
  }
  return rec;
}

inline TrajectoryRecord read_trajectory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  return read_trajectory_csv(is);
}

// Generic numeric table: header row plus rows of doubles (strings kept).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw Error("csv: no column " + name);
  }
  double number(std::size_t row, const std::string& name) const { return parse_double(rows.at(row).at(column(name))); }
};

inline void write_csv(const std::string& path, const CsvTable& t) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  for (std::size_t i = 0; i < t.header.size(); ++i) os << (i ? "," : "") << t.header[i];
  os << "\n";
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << "\n";
  }
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw Error("csv: empty file " + path);
  t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != t.header.size()) throw Error("csv: wrong field count in " + path);
    t.rows.push_back(std::move(f));
  }
  return t;
}

}  // namespace kbflow
