#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "lrpanel/estimates.hpp"
#include "lrpanel/loss.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/panel.hpp"

namespace lrpanel {

/// Localized second-step configuration. The search radius is
/// d = c_radius · log(N∧T) · gamma_nt, with gamma_nt defaulting to the
/// first-step rate proxy sqrt(r · log(N∧T) / (N∧T)).
struct RefineConfig {
  double c_radius = 2.0;
  double gamma_nt = 0.0;      // <= 0 selects the default proxy
  int max_outer = 0;          // <= 0 selects ceil(2 log(NT))
  double tol_theta = 1e-6;
  int newton_steps_inner = 3;
};

struct SecondStepEstimate {
  Vector theta;
  FactorDecomposition factors;
  std::vector<Vector> theta_path;  // length outer_iters + 1
  bool converged = false;
  int outer_iters = 0;
  int clip_events = 0;
  std::string message;
};

namespace detail {

/// Draw-set plumbing: for rc_logit the per-cell standard normals are
/// regenerated on demand; row/column caches keep the Newton backtracking
/// loops from re-deriving them.
struct CellLossCtx {
  const ModelSpec& spec;
  const GaussianDraws* draws = nullptr;  // required iff spec is rc_logit

  bool simulated() const { return spec.family == Family::rc_logit; }
};

inline double ctx_cell_loss(const CellLossCtx& ctx, double y, const Vector& x,
                            const Vector& theta, double pi, const Matrix* z) {
  return ctx.simulated() ? cell_loss(ctx.spec, y, x, theta, pi, *z)
                         : cell_loss(ctx.spec, y, x, theta, pi);
}

inline PiDerivs ctx_pi_derivs(const CellLossCtx& ctx, double y, const Vector& x,
                              const Vector& theta, double pi, const Matrix* z) {
  return ctx.simulated() ? pi_derivatives(ctx.spec, y, x, theta, pi, *z)
                         : pi_derivatives(ctx.spec, y, x, theta, pi);
}

inline DerivativeBundle ctx_bundle(const CellLossCtx& ctx, double y, const Vector& x,
                                   const Vector& theta, double pi, const Matrix* z) {
  return ctx.simulated() ? cell_derivatives(ctx.spec, y, x, theta, pi, *z)
                         : cell_derivatives(ctx.spec, y, x, theta, pi);
}

/// Solves H step = g with escalating Levenberg damping when H is not
/// positive definite.
inline Vector damped_newton_step(Matrix H, const Vector& g, double base_damping) {
  const int n = static_cast<int>(H.rows());
  double damp = base_damping * (1.0 + H.cwiseAbs().trace() / std::max(n, 1));
  for (int tries = 0; tries < 60; ++tries) {
    Eigen::LLT<Matrix> llt(H);
    if (llt.info() == Eigen::Success) {
      Vector step = llt.solve(g);
      if (step.allFinite()) return step;
    }
    H.diagonal().array() += damp;
    damp *= 10.0;
  }
  return Vector::Zero(n);
}

}  // namespace detail

/// One factor update: newton_steps_inner sweeps of per-unit damped Newton
/// solves (each loading given F, each factor given the new loadings), joint
/// Frobenius clipping of the stacked deviation onto the stated balls, then
/// renormalization through factorize_rank_r.
inline FactorDecomposition update_factors(const PanelData& panel, const ModelSpec& spec_in,
                                          const Vector& theta, const FactorDecomposition& prev,
                                          double radius_lambda, double radius_f, int sweeps = 3,
                                          const GaussianDraws* draws = nullptr,
                                          int* clip_events = nullptr) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  const detail::CellLossCtx ctx{spec, draws};
  if (ctx.simulated() && draws == nullptr)
    throw std::invalid_argument("update_factors: rc_logit requires a draw set");
  const int N = panel.N(), T = panel.T(), r = prev.r;
  Matrix Lambda = prev.Lambda, F = prev.F;

  std::vector<Matrix> zrow(std::max(N, T));  // per-unit draw cache, reused by backtracking
  auto unit_row_loss = [&](int i, const Eigen::RowVectorXd& lam) {
    double sum = 0.0;
    for (int t = 0; t < T; ++t) {
      if (!panel.observed(i, t)) continue;
      sum += detail::ctx_cell_loss(ctx, panel.Y(i, t), panel.x_at(i, t), theta,
                                   lam.dot(F.row(t)), ctx.simulated() ? &zrow[t] : nullptr);
    }
    return sum;
  };
  auto unit_col_loss = [&](int t, const Eigen::RowVectorXd& f) {
    double sum = 0.0;
    for (int i = 0; i < N; ++i) {
      if (!panel.observed(i, t)) continue;
      sum += detail::ctx_cell_loss(ctx, panel.Y(i, t), panel.x_at(i, t), theta,
                                   Lambda.row(i).dot(f), ctx.simulated() ? &zrow[i] : nullptr);
    }
    return sum;
  };

  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int i = 0; i < N; ++i) {
      Vector g = Vector::Zero(r);
      Matrix H = Matrix::Zero(r, r);
      for (int t = 0; t < T; ++t) {
        if (!panel.observed(i, t)) continue;
        if (ctx.simulated()) draws->fill_cell(i, t, zrow[t]);
        const auto d = detail::ctx_pi_derivs(ctx, panel.Y(i, t), panel.x_at(i, t), theta,
                                             Lambda.row(i).dot(F.row(t)),
                                             ctx.simulated() ? &zrow[t] : nullptr);
        const Vector f = F.row(t).transpose();
        g.noalias() += d.d1 * f;
        H.noalias() += d.d2 * (f * f.transpose());
      }
      const Vector step = detail::damped_newton_step(H, g, 1e-6);
      const double before = unit_row_loss(i, Lambda.row(i));
      double s = 1.0;
      for (int tries = 0; tries < 30; ++tries) {
        const Eigen::RowVectorXd cand = Lambda.row(i) - s * step.transpose();
        if (unit_row_loss(i, cand) <= before + 1e-12 * (1.0 + std::abs(before))) {
          Lambda.row(i) = cand;
          break;
        }
        s *= 0.5;
      }
    }
    for (int t = 0; t < T; ++t) {
      Vector g = Vector::Zero(r);
      Matrix H = Matrix::Zero(r, r);
      for (int i = 0; i < N; ++i) {
        if (!panel.observed(i, t)) continue;
        if (ctx.simulated()) draws->fill_cell(i, t, zrow[i]);
        const auto d = detail::ctx_pi_derivs(ctx, panel.Y(i, t), panel.x_at(i, t), theta,
                                             Lambda.row(i).dot(F.row(t)),
                                             ctx.simulated() ? &zrow[i] : nullptr);
        const Vector lam = Lambda.row(i).transpose();
        g.noalias() += d.d1 * lam;
        H.noalias() += d.d2 * (lam * lam.transpose());
      }
      const Vector step = detail::damped_newton_step(H, g, 1e-6);
      const double before = unit_col_loss(t, F.row(t));
      double s = 1.0;
      for (int tries = 0; tries < 30; ++tries) {
        const Eigen::RowVectorXd cand = F.row(t) - s * step.transpose();
        if (unit_col_loss(t, cand) <= before + 1e-12 * (1.0 + std::abs(before))) {
          F.row(t) = cand;
          break;
        }
        s *= 0.5;
      }
    }
  }

  // Joint Frobenius clipping of the stacked deviation onto the balls.
  const double dev = std::sqrt((Lambda - prev.Lambda).squaredNorm() + (F - prev.F).squaredNorm());
  const double bound = std::sqrt(radius_lambda * radius_lambda + radius_f * radius_f);
  if (std::isfinite(bound) && dev > bound) {
    const double scale = bound / dev;
    Lambda = prev.Lambda + scale * (Lambda - prev.Lambda);
    F = prev.F + scale * (F - prev.F);
    if (clip_events) ++(*clip_events);
  }

  return factorize_rank_r(Lambda * F.transpose(), r);
}

/// Damped Newton update of theta with Pi = Lambda F' held fixed, clipped to
/// the ball of the given radius around theta_prev.
inline Vector update_theta(const PanelData& panel, const ModelSpec& spec_in,
                           const FactorDecomposition& factors, const Vector& theta_prev,
                           double radius, const GaussianDraws* draws = nullptr,
                           int* clip_events = nullptr) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  const detail::CellLossCtx ctx{spec, draws};
  if (ctx.simulated() && draws == nullptr)
    throw std::invalid_argument("update_theta: rc_logit requires a draw set");
  const int q = static_cast<int>(theta_prev.size());
  const Matrix Pi = factors.reconstruct();

  Matrix z;
  auto total_loss = [&](const Vector& th) {
    double sum = 0.0;
    for (int i = 0; i < panel.N(); ++i)
      for (int t = 0; t < panel.T(); ++t) {
        if (!panel.observed(i, t)) continue;
        if (ctx.simulated()) draws->fill_cell(i, t, z);
        sum += detail::ctx_cell_loss(ctx, panel.Y(i, t), panel.x_at(i, t), th, Pi(i, t),
                                     ctx.simulated() ? &z : nullptr);
      }
    return sum;
  };

  Vector g = Vector::Zero(q);
  Matrix H = Matrix::Zero(q, q);
  for (int i = 0; i < panel.N(); ++i)
    for (int t = 0; t < panel.T(); ++t) {
      if (!panel.observed(i, t)) continue;
      if (ctx.simulated()) draws->fill_cell(i, t, z);
      const auto b = detail::ctx_bundle(ctx, panel.Y(i, t), panel.x_at(i, t), theta_prev,
                                        Pi(i, t), ctx.simulated() ? &z : nullptr);
      g += b.d_theta;
      H += b.d_theta_theta;
    }
  if (g.cwiseAbs().maxCoeff() == 0.0) return theta_prev;

  const Vector step = detail::damped_newton_step(H, g, 1e-8);
  const double before = total_loss(theta_prev);
  Vector theta = theta_prev;
  double s = 1.0;
  for (int tries = 0; tries < 30; ++tries) {
    const Vector cand = theta_prev - s * step;
    if (total_loss(cand) <= before + 1e-12 * (1.0 + std::abs(before))) {
      theta = cand;
      break;
    }
    s *= 0.5;
  }

  const double dist = (theta - theta_prev).norm();
  if (std::isfinite(radius) && dist > radius) {
    theta = theta_prev + (radius / dist) * (theta - theta_prev);
    if (clip_events) ++(*clip_events);
  }
  return theta;
}

/// Localized iterative refinement: alternate the factor and slope updates
/// inside shrinking-radius balls around the previous iterate, renormalizing
/// the factors each outer iteration, until the slope settles.
inline SecondStepEstimate refine_iterative(const PanelData& panel, const ModelSpec& spec_in,
                                           const Vector& theta0, const FactorDecomposition& init,
                                           const RefineConfig& cfg = {},
                                           const GaussianDraws* draws = nullptr) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  require_valid(panel, spec);
  if (init.r < 1) throw std::invalid_argument("refine_iterative: rank must be at least 1");

  const int N = panel.N(), T = panel.T();
  const double min_nt = static_cast<double>(std::min(N, T));
  const double gamma = cfg.gamma_nt > 0.0
                           ? cfg.gamma_nt
                           : std::sqrt(init.r * std::log(min_nt) / min_nt);
  const double d = cfg.c_radius * std::log(min_nt) * gamma;
  const int max_outer =
      cfg.max_outer > 0
          ? cfg.max_outer
          : static_cast<int>(std::ceil(2.0 * std::log(static_cast<double>(N) * T)));

  SecondStepEstimate out;
  out.theta = theta0;
  out.factors = init;
  out.theta_path.push_back(theta0);
  if (d <= 0.0) {
    out.message = "search radius is zero; no update possible";
    return out;
  }

  const double root_n = std::sqrt(static_cast<double>(N));
  const double root_t = std::sqrt(static_cast<double>(T));
  for (int m = 0; m < max_outer; ++m) {
    out.factors = update_factors(panel, spec, out.theta, out.factors, root_n * d, root_t * d,
                                 cfg.newton_steps_inner, draws, &out.clip_events);
    const Vector theta_next =
        update_theta(panel, spec, out.factors, out.theta, d, draws, &out.clip_events);
    const double change = (theta_next - out.theta).norm();
    out.theta = theta_next;
    out.theta_path.push_back(theta_next);
    out.outer_iters = m + 1;
    if (change < cfg.tol_theta) {
      out.converged = true;
      break;
    }
  }
  if (!out.converged) out.message = "outer iteration budget exhausted";
  return out;
}

}  // namespace lrpanel
