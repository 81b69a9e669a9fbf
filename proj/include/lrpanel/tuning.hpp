#pragma once

#include <algorithm>
#include <any>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrpanel/admm.hpp"
#include "lrpanel/estimates.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/mm.hpp"
#include "lrpanel/panel.hpp"

namespace lrpanel {

/// Rank-penalty rule for the information criterion.
struct PenaltyRule {
  enum class Kind { design1, design2, custom };
  Kind kind = Kind::design1;
  double custom_value = 0.0;

  static PenaltyRule design1() { return {Kind::design1, 0.0}; }
  static PenaltyRule design2() { return {Kind::design2, 0.0}; }
  static PenaltyRule custom(double v) { return {Kind::custom, v}; }
};

struct TuningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IcPathEntry {
  double nu = 0.0;
  double ic = std::numeric_limits<double>::infinity();
  int r_hat = 0;
  double objective = 0.0;  // penalized objective achieved by the solver
  bool failed = false;
  std::string error;
};

struct TuningResult {
  double nu_star = 0.0;
  int r_hat = 0;
  std::vector<IcPathEntry> ic_path;  // ascending in nu
  PenaltyRule penalty;
};

/// Rank rule: count of singular values >= NT*nu. Values below 1e-10 of the
/// top singular value are treated as exact zeros first.
inline int estimate_rank(const Vector& sigma, int N, int T, double nu) {
  if (sigma.size() == 0) return 0;
  const double level = static_cast<double>(N) * T * nu;
  const double floor_sv = 1e-10 * sigma[0];
  int r = 0;
  for (int s = 0; s < sigma.size(); ++s)
    if (sigma[s] > floor_sv && sigma[s] >= level) ++r;
  return r;
}

/// Stated rank-penalty magnitudes for the two simulation designs.
inline double default_penalty(const PenaltyRule& rule, int N, int T) {
  const double n = N, t = T;
  switch (rule.kind) {
    case PenaltyRule::Kind::design1:
      return 0.5 * std::log(std::min(n, t)) * std::max(n, t) / (n * t);
    case PenaltyRule::Kind::design2: {
      const double root_nt = std::sqrt(n * t);
      const double inner = std::log(root_nt);
      if (inner <= 1.0) throw std::domain_error("default_penalty: loglog undefined for NT <= e^2");
      return 0.5 * std::log(inner) / root_nt;
    }
    case PenaltyRule::Kind::custom:
      return rule.custom_value;
  }
  throw std::logic_error("default_penalty: unknown rule");
}

/// Default grid: 20 log-spaced points on [0.01, 2]·(sqrt(N)+sqrt(T))/(NT),
/// matching the nu ≍ (sqrt(N) ∨ sqrt(T))/(NT) rate.
inline std::vector<double> default_nu_grid(int N, int T, int points = 20) {
  const double scale = (std::sqrt(static_cast<double>(N)) + std::sqrt(static_cast<double>(T))) /
                       (static_cast<double>(N) * T);
  const double lo = std::log(0.01 * scale), hi = std::log(2.0 * scale);
  std::vector<double> grid(points);
  for (int k = 0; k < points; ++k)
    grid[k] = std::exp(lo + (hi - lo) * k / std::max(points - 1, 1));
  return grid;
}

/// One first-step solve: the estimate, its unpenalized fit loss, an opaque
/// warm-start payload handed to the next grid point, and an optional
/// solver-specific payload kept for the selected point (e.g. the
/// random-coefficient parameters behind a beta_bar estimate).
struct SolverRun {
  FirstStepEstimate estimate;
  double fit_loss = 0.0;
  std::any warm;
  std::any payload;
};

using FirstStepSolver =
    std::function<SolverRun(const PanelData&, const ModelSpec&, double nu, const std::any& warm)>;

/// ADMM-backed solver handle for single-index families.
inline FirstStepSolver admm_solver(AdmmOptions base = {}) {
  return [base](const PanelData& panel, const ModelSpec& spec, double nu,
                const std::any& warm) -> SolverRun {
    AdmmOptions opts = base;
    if (warm.has_value()) opts.init = std::any_cast<AdmmState>(warm);
    SolverRun run;
    AdmmState state;
    run.estimate = estimate_nnr_admm(panel, spec, nu, opts, &state);
    run.fit_loss = aggregate_loss(resolve_defaults(spec, panel), panel, run.estimate.theta,
                                  run.estimate.Pi);
    run.warm = std::move(state);
    return run;
  };
}

/// MM-backed solver handle for the random-coefficient logit.
inline FirstStepSolver mm_solver(MmOptions base = {}) {
  return [base](const PanelData& panel, const ModelSpec& spec, double nu,
                const std::any& warm) -> SolverRun {
    MmOptions opts = base;
    if (warm.has_value()) opts.init = std::any_cast<MmState>(warm);
    MmResult res = estimate_nnr_mm(panel, spec, nu, opts);
    SolverRun run;
    run.fit_loss = res.first.objective - nu * nuclear_norm(res.first.Pi);
    run.estimate = std::move(res.first);
    MmState state;
    state.beta_bar = res.params.beta_bar;
    state.sigma_chol = res.params.sigma_chol;
    state.Pi = run.estimate.Pi;
    run.warm = std::move(state);
    run.payload = std::move(res.params);
    return run;
  };
}

namespace detail {

struct TuningOutcome {
  TuningResult result;
  FirstStepEstimate best;  // estimate at nu_star
  std::any best_payload;   // solver payload at nu_star
};

inline TuningOutcome select_nu_impl(const PanelData& panel, const ModelSpec& spec,
                                    std::vector<double> grid, const PenaltyRule& penalty,
                                    const FirstStepSolver& solver) {
  if (grid.empty()) throw std::invalid_argument("select_nu: empty grid");
  for (double nu : grid)
    if (nu <= 0.0) throw std::invalid_argument("select_nu: grid values must be positive");
  std::sort(grid.begin(), grid.end());

  const double rho = default_penalty(penalty, panel.N(), panel.T());
  const int G = static_cast<int>(grid.size());
  std::vector<IcPathEntry> path(G);
  std::vector<FirstStepEstimate> estimates(G);
  std::vector<std::any> payloads(G);

  // Traverse from the most to the least shrunk problem; each solution warm
  // starts its neighbor.
  std::any warm;
  for (int g = G - 1; g >= 0; --g) {
    IcPathEntry& e = path[g];
    e.nu = grid[g];
    try {
      SolverRun run = solver(panel, spec, grid[g], warm);
      const int r = estimate_rank(singular_values(run.estimate.Pi), panel.N(), panel.T(), grid[g]);
      e.r_hat = r;
      e.ic = run.fit_loss + rho * r;
      e.objective = run.estimate.objective;
      estimates[g] = std::move(run.estimate);
      payloads[g] = std::move(run.payload);
      warm = std::move(run.warm);
    } catch (const SolverError& err) {
      e.failed = true;
      e.error = err.what();
      warm.reset();  // do not propagate a diverged state
    }
  }

  int best = -1;
  for (int g = 0; g < G; ++g) {
    if (path[g].failed) continue;
    if (best < 0 || path[g].ic < path[best].ic) best = g;  // ties keep the smaller nu
  }
  if (best < 0) {
    std::string msg = "select_nu: every grid point failed:";
    for (const auto& e : path) msg += "\n  nu=" + std::to_string(e.nu) + ": " + e.error;
    throw TuningError(msg);
  }

  TuningOutcome out;
  out.result.nu_star = path[best].nu;
  out.result.r_hat = path[best].r_hat;
  out.result.ic_path = std::move(path);
  out.result.penalty = penalty;
  out.best = std::move(estimates[best]);
  out.best_payload = std::move(payloads[best]);
  return out;
}

}  // namespace detail

/// Information-criterion selection of nu over a grid, warm starting each
/// solve from its neighbor: IC(nu) = fit loss + penalty · r_hat(nu).
inline TuningResult select_nu(const PanelData& panel, const ModelSpec& spec,
                              const std::vector<double>& grid, const PenaltyRule& penalty,
                              const FirstStepSolver& solver) {
  return detail::select_nu_impl(panel, spec, grid, penalty, solver).result;
}

}  // namespace lrpanel
