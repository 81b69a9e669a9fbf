#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "lrpanel/estimates.hpp"
#include "lrpanel/loss.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/panel.hpp"

namespace lrpanel {

/// Iterate of the splitting scheme for the penalized single-index problem
///   min (1/|O|) Σ ℓ(Y_it, V_it) + ν‖Π‖_*
///   s.t. V = Σ_j X_j θ_j + Z,  Z = Π
/// with scaled duals U_p, U_v and penalty parameter eta.
struct AdmmState {
  Matrix V, Z, Pi, Up, Uv;
  Vector theta;
  double eta = 1.0;
  int iter = 0;
  bool theta_ridge = false;  // set when the normal equations needed a ridge
};

struct AdmmOptions {
  double eta = 1.0;
  double tol = 1e-6;
  int max_iter = 5000;
  bool adaptive_eta = true;
  std::optional<AdmmState> init;  // warm start, e.g. from a neighboring nu
};

namespace detail {

/// Index-gradient matrix h(Y, V) on observed cells, zero elsewhere.
inline Matrix index_gradient(const ModelSpec& spec, const PanelData& panel, const Matrix& V) {
  const int N = panel.N(), T = panel.T();
  Matrix H = Matrix::Zero(N, T);
  if (spec.family == Family::linear) {
    H = V - panel.Y;
  } else if (spec.family == Family::binary_logit) {
    H = (1.0 / (1.0 + (-V.array()).exp())) - panel.Y.array();
  } else {
    for (int i = 0; i < N; ++i)
      for (int t = 0; t < T; ++t)
        if (panel.observed(i, t)) H(i, t) = index_derivs(spec, panel.Y(i, t), V(i, t)).h1;
  }
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t)
      if (!panel.observed(i, t)) H(i, t) = 0.0;
  return H;
}

inline double observed_loss_sum(const ModelSpec& spec, const PanelData& panel, const Matrix& V) {
  double sum = 0.0;
  for (int i = 0; i < panel.N(); ++i)
    for (int t = 0; t < panel.T(); ++t)
      if (panel.observed(i, t)) sum += index_derivs(spec, panel.Y(i, t), V(i, t)).value;
  return sum;
}

inline Matrix linear_combination(const PanelData& panel, const Vector& theta) {
  Matrix S = Matrix::Zero(panel.N(), panel.T());
  for (int j = 0; j < panel.p(); ++j) S += theta[j] * panel.X[j];
  return S;
}

/// Gram matrix Σ_it x_it x_it' of the covariate slices.
inline Matrix covariate_gram(const PanelData& panel) {
  const int p = panel.p();
  Matrix G(p, p);
  for (int j = 0; j < p; ++j)
    for (int k = j; k < p; ++k) {
      const double v = panel.X[j].cwiseProduct(panel.X[k]).sum();
      G(j, k) = v;
      G(k, j) = v;
    }
  return G;
}

/// Solves the theta least-squares subproblem against target A; a singular
/// Gram matrix falls back to a ridge-regularized solve and sets the flag.
inline Vector theta_ls(const PanelData& panel, const Matrix& gram, const Matrix& A, bool& ridge) {
  const int p = panel.p();
  Vector rhs(p);
  for (int j = 0; j < p; ++j) rhs[j] = panel.X[j].cwiseProduct(A).sum();
  Eigen::LDLT<Matrix> ldlt(gram);
  const double scale = gram.cwiseAbs().maxCoeff();
  const bool singular = ldlt.info() != Eigen::Success ||
                        ldlt.vectorD().minCoeff() <= 1e-12 * std::max(scale, 1.0);
  if (!singular) {
    Vector theta = ldlt.solve(rhs);
    if (theta.allFinite() &&
        (gram * theta - rhs).cwiseAbs().maxCoeff() <= 1e-8 * std::max(1.0, scale))
      return theta;
  }
  ridge = true;
  Matrix reg = gram + 1e-10 * std::max(scale, 1.0) * Matrix::Identity(p, p);
  return reg.ldlt().solve(rhs);
}

/// One V gradient step with backtracking on its local objective
///   Σ_obs w ℓ(Y, V) + (eta/2)‖V - A‖²,  w = NT/|O|.
inline Matrix v_update(const ModelSpec& spec, const PanelData& panel, const Matrix& V,
                       const Matrix& A, double eta, double loss_weight) {
  if (spec.family == Family::linear) {
    Matrix Vn = (eta * A + loss_weight * panel.Y) / (eta + loss_weight);
    for (int i = 0; i < panel.N(); ++i)
      for (int t = 0; t < panel.T(); ++t)
        if (!panel.observed(i, t)) Vn(i, t) = A(i, t);
    return Vn;
  }
  const Matrix grad = loss_weight * index_gradient(spec, panel, V) + eta * (V - A);
  const double phi0 =
      loss_weight * observed_loss_sum(spec, panel, V) + 0.5 * eta * (V - A).squaredNorm();
  double step = 1.0;
  Matrix Vn;
  for (int tries = 0; tries < 30; ++tries) {
    Vn = V - step * grad;
    const double phi = loss_weight * observed_loss_sum(spec, panel, Vn) +
                       0.5 * eta * (Vn - A).squaredNorm();
    if (phi <= phi0 + 1e-12 * (1.0 + std::abs(phi0))) return Vn;
    step *= 0.5;
  }
  return V;  // no descent step found; keep the iterate
}

}  // namespace detail

/// Stopping residuals: primal feasibility of both constraints plus the
/// eta-scaled change of the consensus block, each normalized by sqrt(NT).
inline std::pair<double, double> residuals(const AdmmState& prev, const AdmmState& next,
                                           const PanelData& panel) {
  const double root_nt = std::sqrt(static_cast<double>(panel.N()) * panel.T());
  const Matrix fit = detail::linear_combination(panel, next.theta);
  const double primal =
      (next.V - fit - next.Z).norm() / root_nt + (next.Z - next.Pi).norm() / root_nt;
  const double dual = next.eta * (next.Z - prev.Z).norm() / root_nt;
  return {primal, dual};
}

/// One full sweep of the five block updates (V, theta, Pi, Z, duals).
inline AdmmState admm_step(const AdmmState& state, const PanelData& panel, const ModelSpec& spec,
                           double nu) {
  const double NT = static_cast<double>(panel.N()) * panel.T();
  const double loss_weight = NT / static_cast<double>(panel.observed_count());
  AdmmState next = state;

  const Matrix fit_prev = detail::linear_combination(panel, state.theta);
  next.V = detail::v_update(spec, panel, state.V, fit_prev + state.Z - state.Up, state.eta,
                            loss_weight);
  if (panel.p() > 0) {
    const Matrix A = next.V - state.Z + state.Up;
    next.theta = detail::theta_ls(panel, detail::covariate_gram(panel), A, next.theta_ridge);
  }
  next.Pi = soft_threshold(state.Z + state.Uv, NT * nu / state.eta);
  const Matrix fit = detail::linear_combination(panel, next.theta);
  next.Z = 0.5 * (next.V - fit + state.Up + next.Pi - state.Uv);
  next.Up = state.Up + next.V - fit - next.Z;
  next.Uv = state.Uv + next.Z - next.Pi;
  next.iter = state.iter + 1;
  return next;
}

/// First-step estimator for single-index families.
///
/// The V block takes a unit gradient step on its subproblem (exact minimizer
/// for the linear family), theta is updated by least squares, Pi by singular
/// value thresholding at level NT*nu/eta, Z in closed form, and the scaled
/// duals by ascent. Stops when max(primal, dual) < tol. When `final_state`
/// is given the terminal iterate is copied out for warm starts.
inline FirstStepEstimate estimate_nnr_admm(const PanelData& panel, const ModelSpec& spec_in,
                                           double nu, const AdmmOptions& opts = {},
                                           AdmmState* final_state = nullptr) {
  if (!is_single_index(spec_in.family))
    throw SolverError("estimate_nnr_admm: unsupported family (use the MM solver for rc_logit)");
  if (nu <= 0.0) throw std::invalid_argument("estimate_nnr_admm: nu must be positive");
  if (opts.eta <= 0.0) throw std::invalid_argument("estimate_nnr_admm: eta must be positive");
  require_valid(panel, spec_in);
  const ModelSpec spec = resolve_defaults(spec_in, panel);

  const int N = panel.N(), T = panel.T(), p = panel.p();
  const double NT = static_cast<double>(N) * T;
  const double obs = static_cast<double>(panel.observed_count());
  const double loss_weight = NT / obs;
  const double root_nt = std::sqrt(NT);

  AdmmState s;
  if (opts.init) {
    s = *opts.init;
  } else {
    s.theta = Vector::Zero(p);
    s.eta = opts.eta;
    if (spec.family == Family::linear) {
      s.Pi = soft_threshold(panel.Y, NT * nu / s.eta);
      s.Z = s.Pi;
      s.V = s.Z;
    } else {
      s.V = Matrix::Zero(N, T);
      s.Z = Matrix::Zero(N, T);
      s.Pi = Matrix::Zero(N, T);
    }
    s.Up = Matrix::Zero(N, T);
    s.Uv = Matrix::Zero(N, T);
  }

  const Matrix gram = p > 0 ? detail::covariate_gram(panel) : Matrix();

  FirstStepEstimate est;
  est.nu = nu;
  est.objective_path.reserve(opts.max_iter);

  auto penalized_objective = [&](const Vector& theta, const Matrix& Pi, double pi_nuclear) {
    const Matrix V = detail::linear_combination(panel, theta) + Pi;
    return detail::observed_loss_sum(spec, panel, V) / obs + nu * pi_nuclear;
  };

  double initial_objective = -1.0;
  double primal = 0.0, dual = 0.0;
  int k = 0;
  for (; k < opts.max_iter; ++k) {
    const Matrix Z_prev = s.Z;

    const Matrix fit_prev = detail::linear_combination(panel, s.theta);
    s.V = detail::v_update(spec, panel, s.V, fit_prev + s.Z - s.Up, s.eta, loss_weight);
    if (p > 0) {
      const Matrix A = s.V - s.Z + s.Up;
      s.theta = detail::theta_ls(panel, gram, A, s.theta_ridge);
    }
    const auto svt = soft_threshold_rank(s.Z + s.Uv, NT * nu / s.eta);
    s.Pi = svt.first;
    const Matrix fit = detail::linear_combination(panel, s.theta);
    s.Z = 0.5 * (s.V - fit + s.Up + s.Pi - s.Uv);
    s.Up += s.V - fit - s.Z;
    s.Uv += s.Z - s.Pi;
    s.iter = k + 1;

    primal = (s.V - fit - s.Z).norm() / root_nt + (s.Z - s.Pi).norm() / root_nt;
    dual = s.eta * (s.Z - Z_prev).norm() / root_nt;

    const double objective = penalized_objective(s.theta, s.Pi, nuclear_norm(s.Pi));
    est.objective_path.push_back(objective);
    if (initial_objective < 0.0) initial_objective = objective;
    if (objective > 1e3 * std::max(initial_objective, 1e-8))
      throw SolverError("estimate_nnr_admm: diverged at iteration " + std::to_string(k + 1));

    if (std::max(primal, dual) < opts.tol) break;

    // Rebalance the penalty when one residual dominates; scaled duals shrink
    // or grow inversely with eta.
    if (opts.adaptive_eta && (k + 1) % 10 == 0) {
      if (primal > 10.0 * dual && s.eta < 1e4) {
        s.eta *= 2.0;
        s.Up *= 0.5;
        s.Uv *= 0.5;
      } else if (dual > 10.0 * primal && s.eta > 1e-4) {
        s.eta *= 0.5;
        s.Up *= 2.0;
        s.Uv *= 2.0;
      }
    }
  }

  est.theta = s.theta;
  est.Pi = s.Pi;
  est.primal_res = primal;
  est.dual_res = dual;
  est.iters = s.iter;
  est.converged = std::max(primal, dual) < opts.tol;
  est.objective = est.objective_path.empty() ? penalized_objective(s.theta, s.Pi, nuclear_norm(s.Pi))
                                             : est.objective_path.back();
  if (s.theta_ridge) est.warnings.push_back("theta normal equations regularized with ridge 1e-10");
  if (final_state) *final_state = std::move(s);
  return est;
}

}  // namespace lrpanel
