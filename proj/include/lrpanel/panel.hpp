#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lrpanel {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Loss families supported by the estimators.
enum class Family {
  linear,
  smoothed_quantile,
  binary_logit,
  binary_probit,  // smooth-CDF hook instantiated with the Gaussian CDF
  rc_logit,       // binary logit with Gaussian random coefficients
};

inline bool is_single_index(Family f) { return f != Family::rc_logit; }
inline bool is_binary(Family f) {
  return f == Family::binary_logit || f == Family::binary_probit || f == Family::rc_logit;
}

inline const char* family_name(Family f) {
  switch (f) {
    case Family::linear: return "linear";
    case Family::smoothed_quantile: return "quantile";
    case Family::binary_logit: return "logit";
    case Family::binary_probit: return "probit";
    case Family::rc_logit: return "rclogit";
  }
  return "?";
}

/// Loss family plus its hyperparameters. Family-specific fields are ignored
/// by the other families.
struct ModelSpec {
  Family family = Family::binary_logit;
  double tau = 0.5;           // quantile level, in (0,1)
  double bandwidth_h = 0.0;   // quantile smoothing bandwidth; <=0 selects (N∧T)^{-1/5}
  int draws_R = 200;          // simulation draws for rc_logit
  int rc_dim = 0;             // regressor dimension for rc_logit (equals panel p)
  std::uint64_t draw_seed = 20240711ULL;  // seed of the rc_logit draw stream

  static ModelSpec of(Family f) {
    ModelSpec s;
    s.family = f;
    return s;
  }
};

/// Outcome matrix, covariate slices, and an observed-cell mask.
///
/// All loss sums and sample analogs range over observed cells only; values at
/// masked-out cells are carried as zeros and never read. Immutable after
/// construction by convention, so it can be shared read-only across workers.
struct PanelData {
  Matrix Y;                 // N×T outcomes
  std::vector<Matrix> X;    // p slices, each N×T
  BoolMask mask;            // true = observed

  int N() const { return static_cast<int>(Y.rows()); }
  int T() const { return static_cast<int>(Y.cols()); }
  int p() const { return static_cast<int>(X.size()); }

  bool observed(int i, int t) const { return mask(i, t); }

  long observed_count() const {
    long n = 0;
    for (int i = 0; i < mask.rows(); ++i)
      for (int t = 0; t < mask.cols(); ++t)
        if (mask(i, t)) ++n;
    return n;
  }

  /// Covariate vector at one cell.
  Vector x_at(int i, int t) const {
    Vector x(p());
    for (int j = 0; j < p(); ++j) x[j] = X[j](i, t);
    return x;
  }

  static PanelData fully_observed(Matrix Y, std::vector<Matrix> X) {
    PanelData pd;
    pd.mask = BoolMask::Constant(Y.rows(), Y.cols(), true);
    pd.Y = std::move(Y);
    pd.X = std::move(X);
    return pd;
  }
};

/// Half-open row/column ranges selecting a rectangular subpanel.
struct SubpanelSelector {
  int row_begin = 0, row_end = 0;
  int col_begin = 0, col_end = 0;

  bool valid_for(const PanelData& panel) const {
    return row_begin >= 0 && col_begin >= 0 && row_begin < row_end && col_begin < col_end &&
           row_end <= panel.N() && col_end <= panel.T();
  }
};

/// Checks structural and family-specific invariants; returns human-readable
/// violations (empty means valid).
inline std::vector<std::string> validate(const PanelData& panel, const ModelSpec& spec) {
  std::vector<std::string> out;
  const int N = panel.N(), T = panel.T();
  if (N < 2) out.push_back("N = " + std::to_string(N) + " but at least 2 rows are required");
  if (T < 2) out.push_back("T = " + std::to_string(T) + " but at least 2 columns are required");
  if (panel.mask.rows() != N || panel.mask.cols() != T)
    out.push_back("mask dimensions do not match Y");
  for (int j = 0; j < panel.p(); ++j) {
    if (panel.X[j].rows() != N || panel.X[j].cols() != T)
      out.push_back("covariate slice " + std::to_string(j) + " dimensions do not match Y");
  }
  if (!out.empty()) return out;  // cell scans below assume consistent shapes

  for (int i = 0; i < N; ++i) {
    bool any = false;
    for (int t = 0; t < T; ++t) any = any || panel.mask(i, t);
    if (!any) out.push_back("row " + std::to_string(i) + " has no observed cells");
  }
  for (int t = 0; t < T; ++t) {
    bool any = false;
    for (int i = 0; i < N; ++i) any = any || panel.mask(i, t);
    if (!any) out.push_back("column " + std::to_string(t) + " has no observed cells");
  }

  for (int i = 0; i < N; ++i) {
    for (int t = 0; t < T; ++t) {
      if (!panel.mask(i, t)) continue;
      const double y = panel.Y(i, t);
      if (!std::isfinite(y)) {
        out.push_back("Y(" + std::to_string(i) + "," + std::to_string(t) + ") is not finite");
        continue;
      }
      if (is_binary(spec.family) && y != 0.0 && y != 1.0)
        out.push_back("Y(" + std::to_string(i) + "," + std::to_string(t) + ") = " +
                      std::to_string(y) + " is not in {0,1}");
      for (int j = 0; j < panel.p(); ++j)
        if (!std::isfinite(panel.X[j](i, t)))
          out.push_back("X" + std::to_string(j + 1) + "(" + std::to_string(i) + "," +
                        std::to_string(t) + ") is not finite");
    }
  }

  if (spec.family == Family::smoothed_quantile) {
    if (!(spec.tau > 0.0 && spec.tau < 1.0))
      out.push_back("quantile level tau must lie in (0,1)");
  }
  if (spec.family == Family::rc_logit) {
    if (spec.draws_R < 1) out.push_back("rc_logit draw count R must be positive");
    if (spec.rc_dim != panel.p())
      out.push_back("rc_logit dimension does not match the number of covariates");
  }
  return out;
}

/// Throws on the first validation failure; estimators call this at entry.
inline void require_valid(const PanelData& panel, const ModelSpec& spec) {
  const auto report = validate(panel, spec);
  if (!report.empty()) throw std::invalid_argument("invalid panel: " + report.front());
}

/// Resolves data-dependent defaults (quantile bandwidth, rc dimension).
inline ModelSpec resolve_defaults(ModelSpec spec, const PanelData& panel) {
  if (spec.family == Family::smoothed_quantile && spec.bandwidth_h <= 0.0)
    spec.bandwidth_h = std::pow(static_cast<double>(std::min(panel.N(), panel.T())), -0.2);
  if (spec.family == Family::rc_logit && spec.rc_dim == 0) spec.rc_dim = panel.p();
  return spec;
}

/// Restriction of the panel to the selected rows/columns.
inline PanelData subpanel(const PanelData& panel, const SubpanelSelector& sel) {
  if (!sel.valid_for(panel)) throw std::out_of_range("subpanel selector out of range");
  const int n = sel.row_end - sel.row_begin;
  const int t = sel.col_end - sel.col_begin;
  PanelData out;
  out.Y = panel.Y.block(sel.row_begin, sel.col_begin, n, t);
  out.mask = panel.mask.block(sel.row_begin, sel.col_begin, n, t);
  out.X.reserve(panel.p());
  for (const auto& slice : panel.X) out.X.push_back(slice.block(sel.row_begin, sel.col_begin, n, t));
  return out;
}

}  // namespace lrpanel
