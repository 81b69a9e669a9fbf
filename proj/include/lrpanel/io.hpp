#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrpanel/bias.hpp"
#include "lrpanel/estimates.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/montecarlo.hpp"
#include "lrpanel/panel.hpp"
#include "lrpanel/refine.hpp"
#include "lrpanel/tuning.hpp"

namespace lrpanel {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  for (auto& f : out) {
    const auto a = f.find_first_not_of(" \t");
    const auto b = f.find_last_not_of(" \t");
    f = a == std::string::npos ? "" : f.substr(a, b - a + 1);
  }
  return out;
}

}  // namespace detail

inline constexpr const char* kMissingToken = "NA";

/// Long-format panel CSV: header `i,t,y,x1..xp`, 0-based indices, one row per
/// cell, `NA` marking an unobserved outcome. Cells absent from the file are
/// also treated as unobserved.
inline PanelData read_panel_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open panel file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty panel file: " + path);
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "i" || header[1] != "t" || header[2] != "y")
    throw ParseError("panel header must start with i,t,y: " + path);
  const int p = static_cast<int>(header.size()) - 3;

  struct Row {
    int i, t;
    bool observed;
    double y;
    std::vector<double> x;
  };
  std::vector<Row> rows;
  int max_i = -1, max_t = -1;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    const long row_index = static_cast<long>(rows.size());
    if (static_cast<int>(f.size()) != p + 3)
      throw ParseError("row " + std::to_string(row_index) + " (line " + std::to_string(lineno) +
                       "): expected " + std::to_string(p + 3) + " fields, found " +
                       std::to_string(f.size()));
    Row r;
    try {
      r.i = std::stoi(f[0]);
      r.t = std::stoi(f[1]);
      r.observed = f[2] != kMissingToken;
      r.y = r.observed ? std::stod(f[2]) : 0.0;
      r.x.resize(p);
      for (int j = 0; j < p; ++j) r.x[j] = f[3 + j] == kMissingToken ? 0.0 : std::stod(f[3 + j]);
    } catch (const std::exception&) {
      throw ParseError("row " + std::to_string(row_index) + " (line " + std::to_string(lineno) +
                       "): cannot parse numeric field");
    }
    if (r.i < 0 || r.t < 0)
      throw ParseError("row " + std::to_string(row_index) + ": negative index");
    max_i = std::max(max_i, r.i);
    max_t = std::max(max_t, r.t);
    rows.push_back(std::move(r));
  }
  if (max_i < 0) throw ParseError("panel file has no data rows: " + path);

  PanelData panel;
  panel.Y = Matrix::Zero(max_i + 1, max_t + 1);
  panel.mask = BoolMask::Constant(max_i + 1, max_t + 1, false);
  panel.X.assign(p, Matrix::Zero(max_i + 1, max_t + 1));
  for (const auto& r : rows) {
    panel.Y(r.i, r.t) = r.y;
    panel.mask(r.i, r.t) = r.observed;
    for (int j = 0; j < p; ++j) panel.X[j](r.i, r.t) = r.x[j];
  }
  return panel;
}

inline void write_panel_csv(const std::string& path, const PanelData& panel) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write panel file: " + path);
  out << "i,t,y";
  for (int j = 1; j <= panel.p(); ++j) out << ",x" << j;
  out << "\n";
  for (int i = 0; i < panel.N(); ++i)
    for (int t = 0; t < panel.T(); ++t) {
      out << i << ',' << t << ',';
      if (panel.observed(i, t))
        out << detail::format_double(panel.Y(i, t));
      else
        out << kMissingToken;
      for (int j = 0; j < panel.p(); ++j)
        out << ',' << detail::format_double(panel.X[j](i, t));
      out << "\n";
    }
}

// --- JSON record serialization -------------------------------------------

using json = nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  return m;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vector vector_from_json(const json& j) {
  Vector v(static_cast<int>(j.size()));
  for (int i = 0; i < v.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

inline json to_json(const FirstStepEstimate& e) {
  return json{{"record", "first_step"},
              {"theta", vector_to_json(e.theta)},
              {"Pi", matrix_to_json(e.Pi)},
              {"nu", e.nu},
              {"objective", e.objective},
              {"primal_res", e.primal_res},
              {"dual_res", e.dual_res},
              {"iters", e.iters},
              {"converged", e.converged},
              {"warnings", e.warnings}};
}

inline FirstStepEstimate first_step_from_json(const json& j) {
  FirstStepEstimate e;
  e.theta = vector_from_json(j.at("theta"));
  e.Pi = matrix_from_json(j.at("Pi"));
  e.nu = j.at("nu").get<double>();
  e.objective = j.at("objective").get<double>();
  e.primal_res = j.at("primal_res").get<double>();
  e.dual_res = j.at("dual_res").get<double>();
  e.iters = j.at("iters").get<int>();
  e.converged = j.at("converged").get<bool>();
  if (j.contains("warnings")) e.warnings = j.at("warnings").get<std::vector<std::string>>();
  return e;
}

inline json to_json(const FactorDecomposition& f) {
  return json{{"Lambda", matrix_to_json(f.Lambda)}, {"F", matrix_to_json(f.F)}, {"r", f.r}};
}

inline FactorDecomposition factors_from_json(const json& j) {
  FactorDecomposition f;
  f.Lambda = matrix_from_json(j.at("Lambda"));
  f.F = matrix_from_json(j.at("F"));
  f.r = j.at("r").get<int>();
  return f;
}

inline json to_json(const TuningResult& t) {
  json path = json::array();
  for (const auto& e : t.ic_path)
    path.push_back(json{{"nu", e.nu},
                        {"ic", e.failed ? json() : json(e.ic)},
                        {"r_hat", e.r_hat},
                        {"objective", e.objective},
                        {"failed", e.failed},
                        {"error", e.error}});
  const char* kind = t.penalty.kind == PenaltyRule::Kind::design1   ? "design1"
                     : t.penalty.kind == PenaltyRule::Kind::design2 ? "design2"
                                                                    : "custom";
  return json{{"record", "tuning"},
              {"nu_star", t.nu_star},
              {"r_hat", t.r_hat},
              {"penalty", kind},
              {"penalty_custom_value", t.penalty.custom_value},
              {"ic_path", std::move(path)}};
}

inline json to_json(const SecondStepEstimate& s) {
  json path = json::array();
  for (const auto& th : s.theta_path) path.push_back(vector_to_json(th));
  return json{{"record", "second_step"},
              {"theta", vector_to_json(s.theta)},
              {"factors", to_json(s.factors)},
              {"theta_path", std::move(path)},
              {"converged", s.converged},
              {"outer_iters", s.outer_iters},
              {"clip_events", s.clip_events},
              {"message", s.message}};
}

inline SecondStepEstimate second_step_from_json(const json& j) {
  SecondStepEstimate s;
  s.theta = vector_from_json(j.at("theta"));
  s.factors = factors_from_json(j.at("factors"));
  for (const auto& th : j.at("theta_path")) s.theta_path.push_back(vector_from_json(th));
  s.converged = j.at("converged").get<bool>();
  s.outer_iters = j.at("outer_iters").get<int>();
  s.clip_events = j.at("clip_events").get<int>();
  s.message = j.at("message").get<std::string>();
  return s;
}

inline json to_json(const BiasCorrectedResult& b) {
  json out{{"record", "bias_corrected"},
           {"method", b.method == CorrectionMethod::analytic ? "abc" : "jbc"},
           {"theta_corrected", vector_to_json(b.theta_corrected)},
           {"se", vector_to_json(b.se)},
           {"warnings", b.warnings}};
  if (b.components) {
    out["W_hat"] = matrix_to_json(b.components->W_hat);
    out["B_hat"] = vector_to_json(b.components->B_hat);
    out["D_hat"] = vector_to_json(b.components->D_hat);
    out["truncation_L"] = b.components->truncation_L;
  }
  return out;
}

inline json to_json(const TruthRecord& t) {
  json out{{"record", "truth"},
           {"theta0", vector_to_json(t.theta0)},
           {"Lambda0", matrix_to_json(t.Lambda0)},
           {"F0", matrix_to_json(t.F0)}};
  if (!t.beta_its.empty()) {
    json slices = json::array();
    for (const auto& b : t.beta_its) slices.push_back(matrix_to_json(b));
    out["beta_its"] = std::move(slices);
  }
  return out;
}

inline json to_json(const McSummary& s) {
  json seeds = json::array();
  for (const auto& r : s.per_seed) {
    json rec{{"replication", r.replication},
             {"seed", r.seed},
             {"ok", r.ok},
             {"error", r.error},
             {"nu_star", r.nu_star},
             {"r_hat", r.r_hat}};
    if (r.ok) {
      rec["theta_first"] = vector_to_json(r.theta_first);
      rec["theta_second"] = vector_to_json(r.theta_second);
      if (r.theta_abc) rec["theta_abc"] = vector_to_json(*r.theta_abc);
      if (r.se_abc) rec["se_abc"] = vector_to_json(*r.se_abc);
      if (r.theta_jbc) rec["theta_jbc"] = vector_to_json(*r.theta_jbc);
      if (r.se_jbc) rec["se_jbc"] = vector_to_json(*r.se_jbc);
    }
    seeds.push_back(std::move(rec));
  }
  return json{{"record", "mc_summary"},
              {"rmse_first", s.rmse_first},
              {"rmse_second", s.rmse_second},
              {"mean_r_hat", s.mean_r_hat},
              {"replications", s.replications},
              {"failures", s.failures},
              {"per_seed", std::move(seeds)}};
}

/// Writes a result record as pretty-printed JSON.
inline void write_results(const std::string& path, const json& record) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write results file: " + path);
  out << record.dump(2) << "\n";
}

inline json read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open results file: " + path);
  json j;
  in >> j;
  return j;
}

}  // namespace lrpanel
