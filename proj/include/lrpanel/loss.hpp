#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "lrpanel/panel.hpp"
#include "lrpanel/rng.hpp"

namespace lrpanel {

/// Per-cell loss derivatives up to the orders needed by the second-step
/// Newton updates and the bias formulas. For single-index families every
/// theta-derivative follows from the index derivatives by the chain rule.
///
/// For the random-coefficient logit, theta stacks (beta_bar, vech of the
/// Cholesky factor of Sigma), so the theta blocks have dimension
/// p + p(p+1)/2 instead of p.
struct DerivativeBundle {
  double d_pi = 0.0;   // ∂ℓ/∂π
  double d_pi2 = 0.0;  // ∂²ℓ/∂π²
  double d_pi3 = 0.0;  // ∂³ℓ/∂π³
  Vector d_theta;
  Vector d_theta_pi;
  Vector d_theta_pi2;
  Matrix d_theta_theta;
};

namespace detail {

inline constexpr double kProbFloor = 1e-12;  // probability clamp before logs

inline double logistic_cdf(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline double clamped(double prob) {
  return std::min(std::max(prob, kProbFloor), 1.0 - kProbFloor);
}

inline double bernoulli_nll(double y, double prob) {
  const double f = clamped(prob);
  return -(y * std::log(f) + (1.0 - y) * std::log(1.0 - f));
}

/// Value and first three index derivatives of a single-index loss ℓ(y, v).
struct IndexDerivs {
  double value = 0.0;
  double h1 = 0.0;  // ∂ℓ/∂v
  double h2 = 0.0;
  double h3 = 0.0;
};

inline IndexDerivs linear_index(double y, double v) {
  const double e = y - v;
  return {0.5 * e * e, -e, 1.0, 0.0};
}

inline IndexDerivs logit_index(double y, double v) {
  const double lam = logistic_cdf(v);
  const double g = lam * (1.0 - lam);
  IndexDerivs d;
  d.value = bernoulli_nll(y, lam);
  d.h1 = lam - y;
  d.h2 = g;
  d.h3 = g * (1.0 - 2.0 * lam);
  return d;
}

inline IndexDerivs probit_index(double y, double v) {
  const double kInvSqrt2 = 0.7071067811865475244;
  const double kInvSqrt2Pi = 0.3989422804014326779;
  const double F = clamped(0.5 * std::erfc(-v * kInvSqrt2));
  const double f = kInvSqrt2Pi * std::exp(-0.5 * v * v);
  const double fp = -v * f;
  const double fpp = (v * v - 1.0) * f;
  IndexDerivs d;
  d.value = bernoulli_nll(y, F);
  if (y == 1.0) {
    // derivatives of -log F
    d.h1 = -f / F;
    d.h2 = -(fp * F - f * f) / (F * F);
    d.h3 = -(fpp / F - 3.0 * f * fp / (F * F) + 2.0 * f * f * f / (F * F * F));
  } else {
    const double G = 1.0 - F;
    d.h1 = f / G;
    d.h2 = -(-fp * G - f * f) / (G * G);
    d.h3 = -(-fpp / G - 3.0 * f * fp / (G * G) - 2.0 * f * f * f / (G * G * G));
  }
  return d;
}

/// Smoothed check function rho_tau(u) = u(tau - K(-u/h)) with logistic K,
/// differentiated with respect to v where u = y - v.
inline IndexDerivs quantile_index(double y, double v, double tau, double h) {
  const double u = y - v;
  const double z = -u / h;
  const double K = logistic_cdf(z);
  const double K1 = K * (1.0 - K);
  const double K2 = K1 * (1.0 - 2.0 * K);
  const double K3 = K2 * (1.0 - 2.0 * K) - 2.0 * K1 * K1;
  const double rho1 = tau - K + (u / h) * K1;
  const double rho2 = (2.0 / h) * K1 - (u / (h * h)) * K2;
  const double rho3 = -(3.0 / (h * h)) * K2 + (u / (h * h * h)) * K3;
  IndexDerivs d;
  d.value = u * (tau - K);
  d.h1 = -rho1;
  d.h2 = rho2;
  d.h3 = -rho3;
  return d;
}

inline IndexDerivs index_derivs(const ModelSpec& spec, double y, double v) {
  switch (spec.family) {
    case Family::linear: return linear_index(y, v);
    case Family::binary_logit: return logit_index(y, v);
    case Family::binary_probit: return probit_index(y, v);
    case Family::smoothed_quantile: return quantile_index(y, v, spec.tau, spec.bandwidth_h);
    case Family::rc_logit: break;
  }
  throw std::invalid_argument("rc_logit is not a single-index family");
}

}  // namespace detail

/// Deterministic standard-normal draw set: R draws of dimension `dim` per
/// cell, reproducible from (seed, salt, cell). `salt` distinguishes redraw
/// rounds; salt 0 is the frozen common-random-numbers set reused across all
/// parameter evaluations of an estimation run.
class GaussianDraws {
 public:
  GaussianDraws(std::uint64_t seed, int R, int dim, std::uint64_t salt = 0)
      : rng_(seed, 0x6472617773ULL ^ rng::mix64(salt)), R_(R), dim_(dim), seed_(seed), salt_(salt) {}

  int R() const { return R_; }
  int dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t salt() const { return salt_; }

  GaussianDraws with_salt(std::uint64_t salt) const { return {seed_, R_, dim_, salt}; }

  /// Fills `out` (R×dim) with the standard normals of cell (i, t).
  void fill_cell(int i, int t, Matrix& out) const {
    out.resize(R_, dim_);
    const std::uint64_t cell = (static_cast<std::uint64_t>(i) << 24) ^ static_cast<std::uint64_t>(t);
    const std::uint64_t base = rng::mix64(cell) * static_cast<std::uint64_t>(R_ * dim_ + 1);
    std::uint64_t ctr = base;
    double a, b;
    const long total = static_cast<long>(R_) * dim_;
    long k = 0;
    while (k < total) {
      rng_.normal_pair(ctr++, a, b);
      out(k / dim_, k % dim_) = a;
      ++k;
      if (k < total) {
        out(k / dim_, k % dim_) = b;
        ++k;
      }
    }
  }

  Matrix cell(int i, int t) const {
    Matrix z;
    fill_cell(i, t, z);
    return z;
  }

 private:
  CounterRng rng_;
  int R_;
  int dim_;
  std::uint64_t seed_;
  std::uint64_t salt_;
};

/// Mean and Cholesky factor of the random-coefficient distribution together
/// with its draw stream.
struct RcLogitParams {
  Vector beta_bar;
  Matrix sigma_chol;  // lower triangular, non-negative diagonal
  GaussianDraws draws;

  Matrix sigma() const { return sigma_chol * sigma_chol.transpose(); }
};

inline int rc_theta_dim(int p) { return p + p * (p + 1) / 2; }

/// vech packing of (beta_bar, lower-triangular Cholesky factor), column-major
/// over the lower triangle.
inline Vector rc_pack(const Vector& beta_bar, const Matrix& chol) {
  const int p = static_cast<int>(beta_bar.size());
  Vector theta(rc_theta_dim(p));
  theta.head(p) = beta_bar;
  int k = p;
  for (int c = 0; c < p; ++c)
    for (int r = c; r < p; ++r) theta[k++] = chol(r, c);
  return theta;
}

inline void rc_unpack(const Vector& theta, int p, Vector& beta_bar, Matrix& chol) {
  beta_bar = theta.head(p);
  chol = Matrix::Zero(p, p);
  int k = p;
  for (int c = 0; c < p; ++c)
    for (int r = c; r < p; ++r) chol(r, c) = theta[k++];
}

namespace detail {

/// Shared per-cell workspace for the simulated rc_logit loss: likelihood
/// weights and per-draw logistic derivatives under fixed draws z (R×p).
struct RcCellEval {
  Eigen::ArrayXd w;    // normalized likelihood weights, sum to 1
  Eigen::ArrayXd h;    // Λ(v_r) - y
  Eigen::ArrayXd g;    // Λ'(v_r)
  Eigen::ArrayXd gp;   // Λ''(v_r)
  Eigen::ArrayXd v;    // index per draw
  double loss = 0.0;
};

inline RcCellEval rc_cell_eval(double y, const Vector& x, const Vector& beta_bar,
                               const Matrix& chol, const Matrix& z, double pi,
                               bool need_derivs) {
  const int R = static_cast<int>(z.rows());
  RcCellEval e;
  e.v.resize(R);
  const double base = x.dot(beta_bar) + pi;
  const Vector cx = chol.transpose() * x;  // v_r = base + z_r · (C'x)
  Eigen::ArrayXd loglik(R);
  for (int r = 0; r < R; ++r) {
    const double v = base + z.row(r).dot(cx);
    e.v[r] = v;
    loglik[r] = -bernoulli_nll(y, logistic_cdf(v));
  }
  const double m = loglik.maxCoeff();
  const Eigen::ArrayXd exps = (loglik - m).exp();
  const double s = exps.sum();
  e.w = exps / s;  // log-space normalization; safe when all likelihoods underflow
  e.loss = std::log(static_cast<double>(R)) - (m + std::log(s));
  if (need_derivs) {
    e.h.resize(R);
    e.g.resize(R);
    e.gp.resize(R);
    for (int r = 0; r < R; ++r) {
      const double lam = logistic_cdf(e.v[r]);
      const double g = lam * (1.0 - lam);
      e.h[r] = lam - y;
      e.g[r] = g;
      e.gp[r] = g * (1.0 - 2.0 * lam);
    }
  }
  return e;
}

}  // namespace detail

/// ℓ(W; θ, π) for single-index families.
inline double cell_loss(const ModelSpec& spec, double y, const Vector& x, const Vector& theta,
                        double pi) {
  if (!std::isfinite(y) || !std::isfinite(pi)) throw std::invalid_argument("non-finite loss input");
  return detail::index_derivs(spec, y, x.dot(theta) + pi).value;
}

/// Simulated rc_logit loss -log[(1/R) Σ_r L(β_r, π)] under fixed draws z
/// (R×p); theta packs (beta_bar, vech chol).
inline double cell_loss(const ModelSpec& spec, double y, const Vector& x, const Vector& theta,
                        double pi, const Matrix& z) {
  if (spec.family != Family::rc_logit)
    return cell_loss(spec, y, x, theta, pi);
  if (!std::isfinite(y) || !std::isfinite(pi)) throw std::invalid_argument("non-finite loss input");
  Vector beta_bar;
  Matrix chol;
  rc_unpack(theta, static_cast<int>(x.size()), beta_bar, chol);
  return detail::rc_cell_eval(y, x, beta_bar, chol, z, pi, false).loss;
}

/// Analytic derivative bundle for single-index families.
inline DerivativeBundle cell_derivatives(const ModelSpec& spec, double y, const Vector& x,
                                         const Vector& theta, double pi) {
  const auto d = detail::index_derivs(spec, y, x.dot(theta) + pi);
  DerivativeBundle b;
  b.d_pi = d.h1;
  b.d_pi2 = d.h2;
  b.d_pi3 = d.h3;
  b.d_theta = x * d.h1;
  b.d_theta_pi = x * d.h2;
  b.d_theta_pi2 = x * d.h3;
  b.d_theta_theta = (x * x.transpose()) * d.h2;
  return b;
}

/// Derivative bundle of the simulated rc_logit loss under fixed draws.
///
/// Writing S(θ, π) = Σ_r L(β_r, π), the loss is log R - log S and every
/// derivative is a cumulant of the per-draw quantities under the
/// self-normalized weights w_r = L_r / S.
inline DerivativeBundle cell_derivatives(const ModelSpec& spec, double y, const Vector& x,
                                         const Vector& theta, double pi, const Matrix& z) {
  if (spec.family != Family::rc_logit)
    return cell_derivatives(spec, y, x, theta, pi);
  const int p = static_cast<int>(x.size());
  const int q = rc_theta_dim(p);
  const int R = static_cast<int>(z.rows());
  Vector beta_bar;
  Matrix chol;
  rc_unpack(theta, p, beta_bar, chol);
  const auto e = detail::rc_cell_eval(y, x, beta_bar, chol, z, pi, true);

  // dv_r/dθ: x for the mean block, x_j z_{r,c} for the chol block (vech order)
  Matrix u(R, q);
  for (int r = 0; r < R; ++r) {
    for (int j = 0; j < p; ++j) u(r, j) = x[j];
    int k = p;
    for (int c = 0; c < p; ++c)
      for (int j = c; j < p; ++j) u(r, k++) = x[j] * z(r, c);
  }

  const Eigen::ArrayXd a2 = e.h * e.h - e.g;                          // per-draw S''/S kernel
  const Eigen::ArrayXd a3 = -e.h * e.h * e.h + 3.0 * e.h * e.g - e.gp;  // per-draw S'''/S kernel
  const double m1 = (e.w * e.h).sum();
  const double A2 = (e.w * a2).sum();
  const double A3 = (e.w * a3).sum();
  const Vector wu = u.transpose() * (e.w * e.h).matrix();   // E_w[h u]
  const Vector A2v = u.transpose() * (e.w * a2).matrix();   // E_w[(h²-g) u]
  const Vector A3v = u.transpose() * (e.w * a3).matrix();
  Matrix A2m = Matrix::Zero(q, q);
  for (int r = 0; r < R; ++r)
    A2m.noalias() += (e.w[r] * a2[r]) * (u.row(r).transpose() * u.row(r));

  DerivativeBundle b;
  b.d_pi = m1;
  b.d_pi2 = m1 * m1 - A2;
  b.d_pi3 = -A3 - 3.0 * m1 * A2 + 2.0 * m1 * m1 * m1;
  b.d_theta = wu;
  b.d_theta_pi = -A2v + m1 * wu;
  b.d_theta_theta = -A2m + wu * wu.transpose();
  b.d_theta_pi2 = -A3v - 2.0 * m1 * A2v - A2 * wu + 2.0 * m1 * m1 * wu;
  return b;
}

/// First two index derivatives only; cheaper than the full bundle inside the
/// per-unit Newton sweeps.
struct PiDerivs {
  double d1 = 0.0;
  double d2 = 0.0;
};

inline PiDerivs pi_derivatives(const ModelSpec& spec, double y, const Vector& x,
                               const Vector& theta, double pi) {
  const auto d = detail::index_derivs(spec, y, x.dot(theta) + pi);
  return {d.h1, d.h2};
}

inline PiDerivs pi_derivatives(const ModelSpec& spec, double y, const Vector& x,
                               const Vector& theta, double pi, const Matrix& z) {
  if (spec.family != Family::rc_logit) return pi_derivatives(spec, y, x, theta, pi);
  Vector beta_bar;
  Matrix chol;
  rc_unpack(theta, static_cast<int>(x.size()), beta_bar, chol);
  const auto e = detail::rc_cell_eval(y, x, beta_bar, chol, z, pi, true);
  const double m1 = (e.w * e.h).sum();
  const double A2 = (e.w * (e.h * e.h - e.g)).sum();
  return {m1, m1 * m1 - A2};
}

/// Normalized simulation weights w_r = L(β_r, π) / Σ_{r'} L(β_{r'}, π).
inline Vector rc_weights(const ModelSpec& spec, double y, const Vector& x, const Vector& beta_bar,
                         const Matrix& chol, const Matrix& z, double pi) {
  if (spec.family != Family::rc_logit) throw std::invalid_argument("rc_weights: rc_logit only");
  return detail::rc_cell_eval(y, x, beta_bar, chol, z, pi, false).w.matrix();
}

inline Vector rc_weights(const ModelSpec& spec, double y, const Vector& x,
                         const RcLogitParams& params, int i, int t, double pi) {
  return rc_weights(spec, y, x, params.beta_bar, params.sigma_chol, params.draws.cell(i, t), pi);
}

/// Mean of cell_loss over observed cells.
inline double aggregate_loss(const ModelSpec& spec, const PanelData& panel, const Vector& theta,
                             const Matrix& Pi) {
  if (Pi.rows() != panel.N() || Pi.cols() != panel.T())
    throw std::invalid_argument("aggregate_loss: Pi dimensions do not match the panel");
  double sum = 0.0;
  long count = 0;
  for (int i = 0; i < panel.N(); ++i) {
    for (int t = 0; t < panel.T(); ++t) {
      if (!panel.observed(i, t)) continue;
      sum += cell_loss(spec, panel.Y(i, t), panel.x_at(i, t), theta, Pi(i, t));
      ++count;
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

/// rc_logit overload: simulated loss under the given draw set.
inline double aggregate_loss(const ModelSpec& spec, const PanelData& panel, const Vector& theta,
                             const Matrix& Pi, const GaussianDraws& draws) {
  if (spec.family != Family::rc_logit) return aggregate_loss(spec, panel, theta, Pi);
  Vector beta_bar;
  Matrix chol;
  rc_unpack(theta, panel.p(), beta_bar, chol);
  double sum = 0.0;
  long count = 0;
  Matrix z;
  for (int i = 0; i < panel.N(); ++i) {
    for (int t = 0; t < panel.T(); ++t) {
      if (!panel.observed(i, t)) continue;
      draws.fill_cell(i, t, z);
      sum += detail::rc_cell_eval(panel.Y(i, t), panel.x_at(i, t), beta_bar, chol, z, Pi(i, t),
                                  false)
                 .loss;
      ++count;
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace lrpanel
