#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <stdexcept>
#include <utility>

#include <lapacke.h>

#include "lrpanel/panel.hpp"

namespace lrpanel {

/// Loadings Λ (N×r) and factors F (T×r) normalized so that F'F/T = I_r and
/// Λ'Λ/N is diagonal with non-increasing diagonal.
struct FactorDecomposition {
  Matrix Lambda;
  Matrix F;
  int r = 0;

  Matrix reconstruct() const { return Lambda * F.transpose(); }
};

namespace detail {

struct ThinSvd {
  Matrix U;  // m×k
  Vector s;  // k, non-increasing
  Matrix V;  // n×k
};

/// Full thin SVD backed by LAPACK dgesdd. Eigen 3.4's BDCSVD reads out of
/// bounds on some exactly rank-deficient inputs, which the thresholded
/// iterates here produce routinely, so it is only kept as the fallback for
/// the rare dgesdd non-convergence.
inline ThinSvd thin_svd(const Matrix& A) {
  if (!A.allFinite()) throw std::invalid_argument("SVD input has non-finite entries");
  const int m = static_cast<int>(A.rows());
  const int n = static_cast<int>(A.cols());
  const int k = std::min(m, n);
  ThinSvd out;
  out.U.resize(m, k);
  out.s.resize(k);
  Matrix vt(k, n);
  Matrix work = A;
  const int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'S', m, n, work.data(), m, out.s.data(),
                                  out.U.data(), m, vt.data(), k);
  if (info == 0) {
    out.V = vt.transpose();
    return out;
  }
  Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.U = svd.matrixU();
  out.s = svd.singularValues();
  out.V = svd.matrixV();
  return out;
}

}  // namespace detail

/// Singular values of A, non-increasing.
inline Vector singular_values(const Matrix& A) { return detail::thin_svd(A).s; }

inline double nuclear_norm(const Matrix& A) { return singular_values(A).sum(); }

/// Soft-thresholding operator: shrinks every singular value by iota and
/// floors at zero, keeping the singular vectors.
inline Matrix soft_threshold(const Matrix& A, double iota) {
  if (iota < 0.0) throw std::invalid_argument("soft_threshold: iota must be nonnegative");
  auto svd = detail::thin_svd(A);
  for (int k = 0; k < svd.s.size(); ++k) svd.s[k] = std::max(svd.s[k] - iota, 0.0);
  return svd.U * svd.s.asDiagonal() * svd.V.transpose();
}

/// Soft-thresholding that also reports the post-shrinkage rank.
inline std::pair<Matrix, int> soft_threshold_rank(const Matrix& A, double iota) {
  auto svd = detail::thin_svd(A);
  int rank = 0;
  for (int k = 0; k < svd.s.size(); ++k) {
    svd.s[k] = std::max(svd.s[k] - iota, 0.0);
    if (svd.s[k] > 0.0) ++rank;
  }
  return {svd.U * svd.s.asDiagonal() * svd.V.transpose(), rank};
}

/// Projections onto and off the span of (U0, V0): P(Δ) = U0U0'ΔV0V0',
/// M(Δ) = Δ - P(Δ). Inputs must have orthonormal columns.
inline std::pair<Matrix, Matrix> project_PM(const Matrix& Delta, const Matrix& U0,
                                            const Matrix& V0) {
  const double gu = (U0.transpose() * U0 - Matrix::Identity(U0.cols(), U0.cols())).cwiseAbs().maxCoeff();
  const double gv = (V0.transpose() * V0 - Matrix::Identity(V0.cols(), V0.cols())).cwiseAbs().maxCoeff();
  if (gu > 1e-8 || gv > 1e-8)
    throw std::invalid_argument("project_PM: columns are not orthonormal");
  Matrix P = U0 * (U0.transpose() * Delta * V0) * V0.transpose();
  Matrix M = Delta - P;
  return {std::move(P), std::move(M)};
}

/// Best rank-r approximation of Pi via truncated SVD, returned in the
/// normalized (Λ, F) form. Column signs follow the largest-magnitude entry
/// of each left singular vector, which also pins down sign ties between
/// equal singular values deterministically.
inline FactorDecomposition factorize_rank_r(const Matrix& Pi, int r) {
  const int N = static_cast<int>(Pi.rows());
  const int T = static_cast<int>(Pi.cols());
  if (r < 0 || r > std::min(N, T))
    throw std::invalid_argument("factorize_rank_r: rank exceeds matrix dimensions");
  FactorDecomposition out;
  out.r = r;
  if (r == 0) {
    out.Lambda = Matrix::Zero(N, 0);
    out.F = Matrix::Zero(T, 0);
    return out;
  }
  const auto svd = detail::thin_svd(Pi);
  Matrix U = svd.U.leftCols(r);
  Matrix V = svd.V.leftCols(r);
  const Vector s = svd.s.head(r);
  for (int k = 0; k < r; ++k) {
    int arg = 0;
    U.col(k).cwiseAbs().maxCoeff(&arg);
    if (U(arg, k) < 0.0) {
      U.col(k) = -U.col(k);
      V.col(k) = -V.col(k);
    }
  }
  const double root_t = std::sqrt(static_cast<double>(T));
  out.F = root_t * V;
  out.Lambda = U * s.asDiagonal() / root_t;
  return out;
}

/// Diagonal ±1 alignment Ŝ = sgn(diag(F_hat' F_ref)); sgn(0) = +1. With
/// repeated singular values the alignment is not unique and this rule is
/// just a deterministic pick.
inline Matrix align_sign(const Matrix& F_hat, const Matrix& F_ref) {
  if (F_hat.cols() != F_ref.cols())
    throw std::invalid_argument("align_sign: column counts differ");
  const int r = static_cast<int>(F_hat.cols());
  Matrix S = Matrix::Zero(r, r);
  for (int k = 0; k < r; ++k)
    S(k, k) = (F_hat.col(k).dot(F_ref.col(k)) >= 0.0) ? 1.0 : -1.0;
  return S;
}

}  // namespace lrpanel
