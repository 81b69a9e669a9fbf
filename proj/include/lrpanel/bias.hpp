#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lrpanel/estimates.hpp"
#include "lrpanel/loss.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/panel.hpp"
#include "lrpanel/parallel.hpp"

namespace lrpanel {

/// Weighted two-way projection of each cross-derivative ratio onto the
/// factor span: Ξ_it,k = λ#_{i,k}'f̂_t + λ̂_i'f#_{t,k}.
struct XiProjection {
  std::vector<Matrix> xi;            // per k: N×T fitted values
  std::vector<Matrix> lambda_sharp;  // per k: N×r
  std::vector<Matrix> f_sharp;       // per k: T×r
  double wls_residual_norm = 0.0;
};

struct BiasComponents {
  Matrix W_hat;                 // information matrix for theta
  Vector B_hat;                 // O(1/T) bias numerator
  Vector D_hat;                 // O(1/N) bias numerator
  std::vector<Matrix> H_lambda; // per i: Σ_t ŵ f̂ f̂'
  std::vector<Matrix> H_f;      // per t: Σ_i ŵ λ̂ λ̂'
  int truncation_L = 0;
  std::vector<std::string> warnings;
};

enum class CorrectionMethod { analytic, jackknife };

struct BiasCorrectedResult {
  Vector theta_corrected;
  CorrectionMethod method = CorrectionMethod::analytic;
  Vector se;
  std::optional<BiasComponents> components;
  std::vector<std::string> warnings;
};

namespace detail {

struct CellBundles {
  Matrix d_pi, d_pi2, d_pi3;            // N×T each
  std::vector<Matrix> d_theta_pi;       // per k
  std::vector<Matrix> d_theta_pi2;      // per k
  std::vector<Matrix> d_theta_theta;    // per (k,l) packed k*K+l
  int K = 0;
};

inline CellBundles collect_bundles(const PanelData& panel, const ModelSpec& spec,
                                   const Vector& theta, const Matrix& Pi,
                                   const GaussianDraws* draws) {
  const int N = panel.N(), T = panel.T();
  const int K = static_cast<int>(theta.size());
  CellBundles cb;
  cb.K = K;
  cb.d_pi = Matrix::Zero(N, T);
  cb.d_pi2 = Matrix::Zero(N, T);
  cb.d_pi3 = Matrix::Zero(N, T);
  cb.d_theta_pi.assign(K, Matrix::Zero(N, T));
  cb.d_theta_pi2.assign(K, Matrix::Zero(N, T));
  cb.d_theta_theta.assign(K * K, Matrix::Zero(N, T));
  Matrix z;
  for (int i = 0; i < N; ++i) {
    for (int t = 0; t < T; ++t) {
      if (!panel.observed(i, t)) continue;
      DerivativeBundle b;
      if (spec.family == Family::rc_logit) {
        if (!draws) throw std::invalid_argument("bias correction: rc_logit requires a draw set");
        draws->fill_cell(i, t, z);
        b = cell_derivatives(spec, panel.Y(i, t), panel.x_at(i, t), theta, Pi(i, t), z);
      } else {
        b = cell_derivatives(spec, panel.Y(i, t), panel.x_at(i, t), theta, Pi(i, t));
      }
      cb.d_pi(i, t) = b.d_pi;
      cb.d_pi2(i, t) = b.d_pi2;
      cb.d_pi3(i, t) = b.d_pi3;
      for (int k = 0; k < K; ++k) {
        cb.d_theta_pi[k](i, t) = b.d_theta_pi[k];
        cb.d_theta_pi2[k](i, t) = b.d_theta_pi2[k];
        for (int l = 0; l < K; ++l) cb.d_theta_theta[k * K + l](i, t) = b.d_theta_theta(k, l);
      }
    }
  }
  return cb;
}

inline Matrix solve_spd(const Matrix& A, const Matrix& rhs, bool* ridge_used = nullptr) {
  Eigen::LDLT<Matrix> ldlt(A);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    Matrix out = ldlt.solve(rhs);
    if (out.allFinite()) return out;
  }
  if (ridge_used) *ridge_used = true;
  const double ridge = 1e-8 * (1.0 + A.cwiseAbs().trace() / std::max<int>(A.rows(), 1));
  Matrix reg = A + ridge * Matrix::Identity(A.rows(), A.cols());
  return reg.ldlt().solve(rhs);
}

}  // namespace detail

/// Alternating weighted least squares for the per-component projection
///   min Σ_it ŵ_it (∂_{θ_kπ}ℓ̂/ŵ_it − λ'_{i,k}f̂_t − λ̂'_i f_{t,k})²,
/// with weights ŵ = ∂_{π²}ℓ̂ clamped at 1e-8. The per-unit normal-equation
/// matrices are shared across components.
inline XiProjection estimate_xi(const PanelData& panel, const ModelSpec& spec_in,
                                const Vector& theta, const FactorDecomposition& factors,
                                const GaussianDraws* draws = nullptr) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  const int N = panel.N(), T = panel.T(), r = factors.r;
  const int K = static_cast<int>(theta.size());
  const auto cb = detail::collect_bundles(panel, spec, theta, factors.reconstruct(), draws);

  Matrix w = cb.d_pi2.cwiseMax(1e-8);
  std::vector<Matrix> rho(K);
  for (int k = 0; k < K; ++k) rho[k] = cb.d_theta_pi[k].cwiseQuotient(w);
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t)
      if (!panel.observed(i, t)) w(i, t) = 0.0;

  XiProjection out;
  out.lambda_sharp.assign(K, Matrix::Zero(N, r));
  out.f_sharp.assign(K, Matrix::Zero(T, r));
  out.xi.assign(K, Matrix::Zero(N, T));

  auto fitted = [&](int k, int i, int t) {
    return out.lambda_sharp[k].row(i).dot(factors.F.row(t)) +
           factors.Lambda.row(i).dot(out.f_sharp[k].row(t));
  };

  double max_change = 0.0;
  int sweep = 0;
  for (; sweep < 500; ++sweep) {
    max_change = 0.0;
    for (int i = 0; i < N; ++i) {
      Matrix A = Matrix::Zero(r, r);
      for (int t = 0; t < T; ++t) {
        const Vector f = factors.F.row(t).transpose();
        A.noalias() += w(i, t) * (f * f.transpose());
      }
      Matrix rhs(r, K);
      for (int k = 0; k < K; ++k) {
        Vector b = Vector::Zero(r);
        for (int t = 0; t < T; ++t) {
          if (w(i, t) == 0.0) continue;
          const double resid = rho[k](i, t) - factors.Lambda.row(i).dot(out.f_sharp[k].row(t));
          b.noalias() += w(i, t) * resid * factors.F.row(t).transpose();
        }
        rhs.col(k) = b;
      }
      const Matrix sol = detail::solve_spd(A, rhs);
      for (int k = 0; k < K; ++k) out.lambda_sharp[k].row(i) = sol.col(k).transpose();
    }
    for (int t = 0; t < T; ++t) {
      Matrix C = Matrix::Zero(r, r);
      for (int i = 0; i < N; ++i) {
        const Vector lam = factors.Lambda.row(i).transpose();
        C.noalias() += w(i, t) * (lam * lam.transpose());
      }
      Matrix rhs(r, K);
      for (int k = 0; k < K; ++k) {
        Vector b = Vector::Zero(r);
        for (int i = 0; i < N; ++i) {
          if (w(i, t) == 0.0) continue;
          const double resid = rho[k](i, t) - out.lambda_sharp[k].row(i).dot(factors.F.row(t));
          b.noalias() += w(i, t) * resid * factors.Lambda.row(i).transpose();
        }
        rhs.col(k) = b;
      }
      const Matrix sol = detail::solve_spd(C, rhs);
      for (int k = 0; k < K; ++k) out.f_sharp[k].row(t) = sol.col(k).transpose();
    }

    double scale = 0.0;
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < N; ++i)
        for (int t = 0; t < T; ++t) {
          const double v = fitted(k, i, t);
          max_change = std::max(max_change, std::abs(v - out.xi[k](i, t)));
          scale = std::max(scale, std::abs(v));
          out.xi[k](i, t) = v;
        }
    }
    if (max_change <= 1e-8 * (1.0 + scale)) break;
  }
  if (sweep == 500)
    throw SolverError("estimate_xi: alternating WLS did not converge in 500 sweeps; last change " +
                      std::to_string(max_change));

  double resid_sq = 0.0;
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < N; ++i)
      for (int t = 0; t < T; ++t) {
        if (w(i, t) == 0.0) continue;
        const double e = rho[k](i, t) - out.xi[k](i, t);
        resid_sq += w(i, t) * e * e;
      }
  out.wls_residual_norm = std::sqrt(resid_sq);
  return out;
}

/// Sample analogs Ŵ, B̂, D̂ of the information matrix and the two asymptotic
/// bias numerators, with the forward serial sum in B̂ truncated at lag L.
inline BiasComponents estimate_bias_components(const PanelData& panel, const ModelSpec& spec_in,
                                               const Vector& theta,
                                               const FactorDecomposition& factors,
                                               int truncation_L,
                                               const GaussianDraws* draws = nullptr) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  const int N = panel.N(), T = panel.T(), r = factors.r;
  const int K = static_cast<int>(theta.size());
  if (truncation_L < 0 || truncation_L > T - 1)
    throw std::invalid_argument("estimate_bias_components: truncation lag out of range");

  const auto cb = detail::collect_bundles(panel, spec, theta, factors.reconstruct(), draws);
  const auto xi = estimate_xi(panel, spec, theta, factors, draws);

  BiasComponents out;
  out.truncation_L = truncation_L;

  // D̂_{θπ^q} = ∂_{θπ^q}ℓ̂ − Ξ̂ ∂_{π^{q+1}}ℓ̂ per component.
  std::vector<Matrix> D1(K), D2(K);
  for (int k = 0; k < K; ++k) {
    D1[k] = cb.d_theta_pi[k] - xi.xi[k].cwiseProduct(cb.d_pi2);
    D2[k] = cb.d_theta_pi2[k] - xi.xi[k].cwiseProduct(cb.d_pi3);
  }

  long obs = 0;
  out.W_hat = Matrix::Zero(K, K);
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) {
      if (!panel.observed(i, t)) continue;
      ++obs;
      for (int k = 0; k < K; ++k)
        for (int l = 0; l < K; ++l)
          out.W_hat(k, l) += cb.d_theta_theta[k * K + l](i, t) -
                             cb.d_pi2(i, t) * xi.xi[k](i, t) * xi.xi[l](i, t);
    }
  out.W_hat /= static_cast<double>(obs);
  out.W_hat = 0.5 * (out.W_hat + out.W_hat.transpose()).eval();

  const Matrix w_clamped = cb.d_pi2.cwiseMax(1e-8);
  out.H_lambda.assign(N, Matrix::Zero(r, r));
  out.H_f.assign(T, Matrix::Zero(r, r));
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) {
      if (!panel.observed(i, t)) continue;
      const Vector f = factors.F.row(t).transpose();
      const Vector lam = factors.Lambda.row(i).transpose();
      out.H_lambda[i].noalias() += w_clamped(i, t) * (f * f.transpose());
      out.H_f[t].noalias() += w_clamped(i, t) * (lam * lam.transpose());
    }

  bool ridge = false;
  out.B_hat = Vector::Zero(K);
  for (int i = 0; i < N; ++i) {
    const Matrix Hinv_f = detail::solve_spd(out.H_lambda[i], factors.F.transpose(), &ridge);  // r×T
    for (int t = 0; t < T; ++t) {
      if (!panel.observed(i, t)) continue;
      const int tau_end = std::min(t + truncation_L, T - 1);
      for (int tau = t; tau <= tau_end; ++tau) {
        if (!panel.observed(i, tau)) continue;
        const double kernel = factors.F.row(t).dot(Hinv_f.col(tau));
        for (int k = 0; k < K; ++k)
          out.B_hat[k] += kernel * cb.d_pi(i, t) * D1[k](i, tau);
      }
      const double diag_kernel = factors.F.row(t).dot(Hinv_f.col(t));
      for (int k = 0; k < K; ++k) out.B_hat[k] += 0.5 * diag_kernel * D2[k](i, t);
    }
  }
  out.B_hat *= -1.0 / static_cast<double>(N);

  out.D_hat = Vector::Zero(K);
  for (int t = 0; t < T; ++t) {
    const Matrix Hinv_l = detail::solve_spd(out.H_f[t], factors.Lambda.transpose(), &ridge);  // r×N
    for (int i = 0; i < N; ++i) {
      if (!panel.observed(i, t)) continue;
      const double kernel = factors.Lambda.row(i).dot(Hinv_l.col(i));
      for (int k = 0; k < K; ++k)
        out.D_hat[k] += kernel * (cb.d_pi(i, t) * D1[k](i, t) + 0.5 * D2[k](i, t));
    }
  }
  out.D_hat *= -1.0 / static_cast<double>(T);

  if (ridge) out.warnings.push_back("singular H matrix regularized with ridge 1e-8");
  return out;
}

/// θ_ABC = θ̂ − (1/T)Ŵ⁻¹B̂ − (1/N)Ŵ⁻¹D̂, with standard errors from the
/// inverse information matrix scaled by 1/(NT).
inline BiasCorrectedResult analytic_correction(const Vector& theta, const BiasComponents& comp,
                                               int N, int T) {
  const int K = static_cast<int>(theta.size());
  Eigen::JacobiSVD<Matrix> svd(comp.W_hat, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double smin = svd.singularValues().minCoeff();
  const double smax = svd.singularValues().maxCoeff();
  if (smin <= 0.0 || smax / smin > 1e10)
    throw SolverError("analytic_correction: W is numerically singular");

  const Matrix Winv = svd.solve(Matrix::Identity(K, K));
  BiasCorrectedResult out;
  out.method = CorrectionMethod::analytic;
  out.theta_corrected = theta - Winv * comp.B_hat / static_cast<double>(T) -
                        Winv * comp.D_hat / static_cast<double>(N);
  out.se.resize(K);
  const double nt = static_cast<double>(N) * T;
  for (int k = 0; k < K; ++k) out.se[k] = std::sqrt(std::max(Winv(k, k), 0.0) / nt);
  out.components = comp;
  out.warnings = comp.warnings;
  return out;
}

/// Split-panel jackknife combination.
inline Vector jackknife_combine(const Vector& theta, const Vector& n_half1, const Vector& n_half2,
                                const Vector& t_half1, const Vector& t_half2) {
  return 3.0 * theta - 0.5 * (n_half1 + n_half2) - 0.5 * (t_half1 + t_half2);
}

/// Estimation output a jackknife pipeline must provide for each (sub)panel.
struct PipelineFit {
  Vector theta;
  FactorDecomposition factors;
};

using PipelineFn = std::function<PipelineFit(const PanelData&)>;

/// Split-panel jackknife: runs the full pipeline on the two N-halves and the
/// two T-halves and combines. Standard errors come from the full-sample Ŵ.
/// Odd dimensions are trimmed by one row/column for the half-panels.
inline BiasCorrectedResult jackknife_correction(const PanelData& panel, const ModelSpec& spec_in,
                                                const PipelineFn& pipeline,
                                                const PipelineFit* full_fit = nullptr,
                                                const GaussianDraws* draws = nullptr,
                                                int threads = 1) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  const int N = panel.N(), T = panel.T();
  BiasCorrectedResult out;
  out.method = CorrectionMethod::jackknife;

  const int Ne = N - (N % 2), Te = T - (T % 2);
  if (Ne != N) out.warnings.push_back("odd N: last row dropped in the half-panels");
  if (Te != T) out.warnings.push_back("odd T: last column dropped in the half-panels");

  PipelineFit full;
  if (full_fit) {
    full = *full_fit;
  } else {
    try {
      full = pipeline(panel);
    } catch (const std::exception& e) {
      throw SolverError(std::string("jackknife: estimation failed on the full panel: ") + e.what());
    }
  }

  const SubpanelSelector sel[4] = {
      {0, Ne / 2, 0, T},
      {Ne / 2, Ne, 0, T},
      {0, N, 0, Te / 2},
      {0, N, Te / 2, Te},
  };
  const char* names[4] = {"first N-half", "second N-half", "first T-half", "second T-half"};

  std::vector<Vector> sub(4);
  std::vector<std::string> errors(4);
  parallel_for(4, threads, [&](std::size_t h) {
    try {
      sub[h] = pipeline(subpanel(panel, sel[h])).theta;
    } catch (const std::exception& e) {
      errors[h] = e.what();
    }
  });
  for (int h = 0; h < 4; ++h)
    if (!errors[h].empty())
      throw SolverError("jackknife: estimation failed on the " + std::string(names[h]) + ": " +
                        errors[h]);

  out.theta_corrected = jackknife_combine(full.theta, sub[0], sub[1], sub[2], sub[3]);

  // Full-sample information matrix for the standard errors.
  const auto xi = estimate_xi(panel, spec, full.theta, full.factors, draws);
  const auto cb = detail::collect_bundles(panel, spec, full.theta, full.factors.reconstruct(),
                                          draws);
  const int K = static_cast<int>(full.theta.size());
  Matrix W = Matrix::Zero(K, K);
  long obs = 0;
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) {
      if (!panel.observed(i, t)) continue;
      ++obs;
      for (int k = 0; k < K; ++k)
        for (int l = 0; l < K; ++l)
          W(k, l) += cb.d_theta_theta[k * K + l](i, t) -
                     cb.d_pi2(i, t) * xi.xi[k](i, t) * xi.xi[l](i, t);
    }
  W /= static_cast<double>(obs);
  Eigen::JacobiSVD<Matrix> svd(W, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double smin = svd.singularValues().minCoeff();
  if (smin <= 0.0 || svd.singularValues().maxCoeff() / smin > 1e10)
    throw SolverError("jackknife_correction: W is numerically singular");
  const Matrix Winv = svd.solve(Matrix::Identity(K, K));
  out.se.resize(K);
  const double nt = static_cast<double>(N) * T;
  for (int k = 0; k < K; ++k) out.se[k] = std::sqrt(std::max(Winv(k, k), 0.0) / nt);
  return out;
}

}  // namespace lrpanel
