#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "lrpanel/loss.hpp"
#include "lrpanel/panel.hpp"
#include "lrpanel/rng.hpp"

using namespace lrpanel;

namespace {

// Scale-protected relative error.
double rel_err(double got, double want) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1.0});
}

// Fourth-order central finite differences; mixed partials come from
// directional derivatives so that no stencil is nested inside another.
double fd1(const std::function<double(double)>& f, double x, double h = 1e-4) {
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12.0 * h);
}
double fd2(const std::function<double(double)>& f, double x, double h = 1e-3) {
  return (-f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h) - f(x - 2 * h)) /
         (12.0 * h * h);
}
double fd3(const std::function<double(double)>& f, double x, double h = 5e-3) {
  return (f(x - 3 * h) - 8 * f(x - 2 * h) + 13 * f(x - h) - 13 * f(x + h) + 8 * f(x + 2 * h) -
          f(x + 3 * h)) /
         (8.0 * h * h * h);
}

struct TestPoint {
  double y;
  Vector x;
  Vector theta;
  double pi;
};

TestPoint random_point(const CounterRng& rng, std::uint64_t k, Family family, int p) {
  TestPoint pt;
  pt.x = Vector(p);
  pt.theta = Vector(p);
  for (int j = 0; j < p; ++j) {
    pt.x[j] = rng.normal(k * 97 + 11 + j);
    pt.theta[j] = 0.5 * rng.normal(k * 97 + 31 + j);
  }
  pt.pi = rng.normal(k * 97 + 53);
  if (is_binary(family))
    pt.y = rng.uniform(k * 97 + 71) < 0.5 ? 0.0 : 1.0;
  else
    pt.y = 2.0 * rng.normal(k * 97 + 71);
  return pt;
}

void check_bundle_against_fd(const ModelSpec& spec, const TestPoint& pt, double tol,
                             const Matrix* z = nullptr, double h3 = 5e-3) {
  const int p = static_cast<int>(pt.x.size());
  const bool rc = spec.family == Family::rc_logit;
  const int q = rc ? rc_theta_dim(p) : p;
  Vector theta = pt.theta;
  if (rc) {
    Matrix chol = Matrix::Zero(p, p);
    chol.diagonal().setConstant(0.4);
    chol(1, 0) = 0.1;
    theta = rc_pack(pt.theta, chol);
  }

  auto loss_at = [&](const Vector& th, double pi) {
    return rc ? cell_loss(spec, pt.y, pt.x, th, pi, *z) : cell_loss(spec, pt.y, pt.x, th, pi);
  };
  const DerivativeBundle b = rc ? cell_derivatives(spec, pt.y, pt.x, theta, pt.pi, *z)
                                : cell_derivatives(spec, pt.y, pt.x, theta, pt.pi);

  // 1-D slice along direction (a in theta_j, c in pi).
  auto slice = [&](int j, double a, double c) {
    return std::function<double(double)>([&, j, a, c](double s) {
      Vector th = theta;
      if (j >= 0) th[j] += a * s;
      return loss_at(th, pt.pi + c * s);
    });
  };

  auto f_pi = [&](double v) { return loss_at(theta, v); };
  CHECK(rel_err(b.d_pi, fd1(f_pi, pt.pi)) < tol);
  CHECK(rel_err(b.d_pi2, fd2(f_pi, pt.pi)) < tol);
  CHECK(rel_err(b.d_pi3, fd3(f_pi, pt.pi, h3)) < tol);

  for (int j = 0; j < q; ++j) {
    auto f_tj = slice(j, 1.0, 0.0);
    CHECK(rel_err(b.d_theta[j], fd1(f_tj, 0.0)) < tol);

    // f_θπ = [D²_{(1,1)} − D²_{(1,−1)}] / 4
    const double mixed2 = (fd2(slice(j, 1.0, 1.0), 0.0) - fd2(slice(j, 1.0, -1.0), 0.0)) / 4.0;
    CHECK(rel_err(b.d_theta_pi[j], mixed2) < tol);

    // f_θππ = [D³_{(1,1)} + D³_{(1,−1)} − 2 D³_{(1,0)}] / 6
    const double mixed3 = (fd3(slice(j, 1.0, 1.0), 0.0, h3) + fd3(slice(j, 1.0, -1.0), 0.0, h3) -
                           2.0 * fd3(slice(j, 1.0, 0.0), 0.0, h3)) /
                          6.0;
    CHECK(rel_err(b.d_theta_pi2[j], mixed3) < tol);

    for (int l = j; l < q; ++l) {
      double got;
      if (l == j) {
        got = fd2(f_tj, 0.0);
      } else {
        auto diag = [&](double sign) {
          return std::function<double(double)>([&, j, l, sign](double s) {
            Vector th = theta;
            th[j] += s;
            th[l] += sign * s;
            return loss_at(th, pt.pi);
          });
        };
        got = (fd2(diag(1.0), 0.0) - fd2(diag(-1.0), 0.0)) / 4.0;
      }
      CHECK(rel_err(b.d_theta_theta(j, l), got) < tol);
    }
  }
}

}  // namespace

TEST_CASE("logit loss and derivatives at the symmetric point") {
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const Vector x = (Vector(1) << 0.0).finished();
  const Vector theta = (Vector(1) << 0.0).finished();
  CHECK(cell_loss(spec, 1.0, x, theta, 0.0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  const auto b = cell_derivatives(spec, 1.0, x, theta, 0.0);
  CHECK(b.d_pi == Catch::Approx(-0.5).margin(1e-12));
  CHECK(b.d_pi2 == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("linear loss is zero at a perfect fit") {
  const ModelSpec spec = ModelSpec::of(Family::linear);
  const Vector x = (Vector(2) << 1.5, -0.5).finished();
  const Vector theta = (Vector(2) << 2.0, 1.0).finished();
  const double pi = 0.7;
  const double y = x.dot(theta) + pi;
  CHECK(cell_loss(spec, y, x, theta, pi) == 0.0);
}

TEST_CASE("degenerate random-coefficient logit collapses to plain logit") {
  ModelSpec rc = ModelSpec::of(Family::rc_logit);
  rc.draws_R = 1;
  rc.rc_dim = 2;
  const ModelSpec logit = ModelSpec::of(Family::binary_logit);
  const Vector x = (Vector(2) << 0.3, -1.1).finished();
  const Vector beta_bar = (Vector(2) << 0.8, 0.4).finished();
  const Matrix chol = Matrix::Zero(2, 2);
  const Matrix z = Matrix::Random(1, 2);
  const Vector theta = rc_pack(beta_bar, chol);
  for (double y : {0.0, 1.0})
    for (double pi : {-0.9, 0.0, 1.3})
      CHECK(cell_loss(rc, y, x, theta, pi, z) ==
            Catch::Approx(cell_loss(logit, y, x, beta_bar, pi)).epsilon(1e-14));
}

TEST_CASE("derivative bundles match finite differences on random points") {
  const CounterRng rng(991, 7);
  const int points = 60;

  SECTION("linear") {
    const ModelSpec spec = ModelSpec::of(Family::linear);
    for (int k = 0; k < points; ++k)
      check_bundle_against_fd(spec, random_point(rng, k, spec.family, 3), 1e-6);
  }
  SECTION("logit") {
    const ModelSpec spec = ModelSpec::of(Family::binary_logit);
    for (int k = 0; k < points; ++k)
      check_bundle_against_fd(spec, random_point(rng, 1000 + k, spec.family, 3), 1e-6);
  }
  SECTION("probit") {
    const ModelSpec spec = ModelSpec::of(Family::binary_probit);
    for (int k = 0; k < points; ++k)
      check_bundle_against_fd(spec, random_point(rng, 2000 + k, spec.family, 3), 1e-6);
  }
  SECTION("smoothed quantile") {
    ModelSpec spec = ModelSpec::of(Family::smoothed_quantile);
    spec.tau = 0.35;
    spec.bandwidth_h = 0.45;
    for (int k = 0; k < points; ++k)
      check_bundle_against_fd(spec, random_point(rng, 3000 + k, spec.family, 3), 1e-6, nullptr,
                              2.5e-3);
  }
  SECTION("random-coefficient logit with frozen draws") {
    ModelSpec spec = ModelSpec::of(Family::rc_logit);
    spec.rc_dim = 2;
    const GaussianDraws draws(77, 16, 2);
    for (int k = 0; k < 20; ++k) {
      const Matrix z = draws.cell(k, 3);
      check_bundle_against_fd(spec, random_point(rng, 4000 + k, spec.family, 2), 1e-3, &z);
    }
  }
}

TEST_CASE("single-index chain rule holds exactly") {
  const CounterRng rng(5150, 2);
  for (Family fam : {Family::linear, Family::binary_logit, Family::binary_probit,
                     Family::smoothed_quantile}) {
    ModelSpec spec = ModelSpec::of(fam);
    spec.bandwidth_h = 0.6;
    for (int k = 0; k < 25; ++k) {
      const auto pt = random_point(rng, 100 * static_cast<int>(fam) + k, fam, 3);
      const auto b = cell_derivatives(spec, pt.y, pt.x, pt.theta, pt.pi);
      CHECK((b.d_theta - pt.x * b.d_pi).cwiseAbs().maxCoeff() == 0.0);
      CHECK((b.d_theta_pi - pt.x * b.d_pi2).cwiseAbs().maxCoeff() == 0.0);
      CHECK((b.d_theta_pi2 - pt.x * b.d_pi3).cwiseAbs().maxCoeff() == 0.0);
      CHECK((b.d_theta_theta - b.d_theta_theta.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("logit loss is convex in the index pair") {
  const CounterRng rng(31337, 3);
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  for (int k = 0; k < 50; ++k) {
    const auto pt = random_point(rng, k, spec.family, 3);
    const auto b = cell_derivatives(spec, pt.y, pt.x, pt.theta, pt.pi);
    const Vector u = pt.x.normalized();
    Matrix H(2, 2);
    H(0, 0) = u.dot(b.d_theta_theta * u);
    H(0, 1) = H(1, 0) = u.dot(b.d_theta_pi);
    H(1, 1) = b.d_pi2;
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
  }
}

TEST_CASE("smoothed check converges to the exact check function") {
  const double tau = 0.3;
  for (double h : {0.5, 0.1, 0.02}) {
    ModelSpec spec = ModelSpec::of(Family::smoothed_quantile);
    spec.tau = tau;
    spec.bandwidth_h = h;
    const Vector x0 = Vector::Zero(1);
    const Vector th0 = Vector::Zero(1);
    for (double u = -5.0; u <= 5.0; u += 0.21) {
      if (std::abs(u) <= h) continue;
      const double smoothed = cell_loss(spec, u, x0, th0, 0.0);
      const double exact = u * (tau - (u < 0.0 ? 1.0 : 0.0));
      CHECK(std::abs(smoothed - exact) <= h);
    }
  }
}

TEST_CASE("aggregate loss averages per-cell losses over observed cells") {
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const CounterRng rng(8, 8);
  const int N = 3, T = 3;
  Matrix Y(N, T), X1(N, T);
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) {
      Y(i, t) = rng.uniform(i * T + t) < 0.5 ? 0 : 1;
      X1(i, t) = rng.normal(100 + i * T + t);
    }
  auto panel = PanelData::fully_observed(Y, {X1});
  const Vector theta = (Vector(1) << 0.7).finished();
  Matrix Pi(N, T);
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) Pi(i, t) = 0.1 * (i - t);

  double hand = 0.0;
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t)
      hand += cell_loss(spec, Y(i, t), panel.x_at(i, t), theta, Pi(i, t));
  CHECK(aggregate_loss(spec, panel, theta, Pi) == Catch::Approx(hand / 9.0).epsilon(1e-14));

  // masking one cell switches the divisor to the observed count
  panel.mask(1, 1) = false;
  const double hand8 = hand - cell_loss(spec, Y(1, 1), panel.x_at(1, 1), theta, Pi(1, 1));
  CHECK(aggregate_loss(spec, panel, theta, Pi) == Catch::Approx(hand8 / 8.0).epsilon(1e-14));
}

TEST_CASE("all-ones logit panel loss vanishes as the index grows") {
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const auto panel = PanelData::fully_observed(Matrix::Ones(4, 4), {});
  const Vector theta(0);
  double prev = aggregate_loss(spec, panel, theta, Matrix::Zero(4, 4));
  for (double level : {1.0, 3.0, 8.0, 20.0}) {
    const double cur = aggregate_loss(spec, panel, theta, Matrix::Constant(4, 4, level));
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK(prev < 1e-8);
}

TEST_CASE("rc weights normalize and match the direct likelihood ratio") {
  ModelSpec spec = ModelSpec::of(Family::rc_logit);
  spec.rc_dim = 2;
  const Vector x = (Vector(2) << 0.9, -0.4).finished();
  const Vector beta_bar = (Vector(2) << 0.5, 0.2).finished();
  Matrix chol = Matrix::Zero(2, 2);
  chol.diagonal().setConstant(0.6);

  SECTION("single draw") {
    const Matrix z = Matrix::Random(1, 2);
    const Vector w = rc_weights(spec, 1.0, x, beta_bar, chol, z, 0.3);
    REQUIRE(w.size() == 1);
    CHECK(w[0] == 1.0);
  }
  SECTION("identical draws share weight equally") {
    Matrix z(4, 2);
    z << 0.3, -0.2, 0.3, -0.2, 0.3, -0.2, 0.3, -0.2;
    const Vector w = rc_weights(spec, 0.0, x, beta_bar, chol, z, -0.1);
    for (int r = 0; r < 4; ++r) CHECK(w[r] == Catch::Approx(0.25).margin(1e-15));
  }
  SECTION("random draws: sum one and equal the brute-force ratio") {
    const GaussianDraws draws(321, 8, 2);
    const Matrix z = draws.cell(0, 0);
    const double y = 1.0, pi = -0.4;
    const Vector w = rc_weights(spec, y, x, beta_bar, chol, z, pi);
    CHECK(std::abs(w.sum() - 1.0) < 1e-12);
    // direct ratio computation
    Vector lik(8);
    for (int r = 0; r < 8; ++r) {
      const Vector beta = beta_bar + chol * z.row(r).transpose();
      const double prob = 1.0 / (1.0 + std::exp(-(x.dot(beta) + pi)));
      lik[r] = y == 1.0 ? prob : 1.0 - prob;
    }
    for (int r = 0; r < 8; ++r) CHECK(w[r] == Catch::Approx(lik[r] / lik.sum()).epsilon(1e-10));
  }
}

TEST_CASE("frozen-draw rc loss is deterministic") {
  ModelSpec spec = ModelSpec::of(Family::rc_logit);
  spec.rc_dim = 2;
  const GaussianDraws draws(2024, 32, 2);
  const Matrix z1 = draws.cell(5, 9);
  const Matrix z2 = draws.cell(5, 9);
  CHECK(z1 == z2);
  const Vector x = (Vector(2) << 1.0, 0.5).finished();
  const Vector theta = rc_pack((Vector(2) << 0.4, -0.3).finished(), 0.5 * Matrix::Identity(2, 2));
  const double a = cell_loss(spec, 1.0, x, theta, 0.2, z1);
  const double b = cell_loss(spec, 1.0, x, theta, 0.2, z2);
  CHECK(a == b);
  // a different salt produces a different draw set
  CHECK(draws.with_salt(1).cell(5, 9) != z1);
}

TEST_CASE("pi derivatives agree with the full bundle") {
  ModelSpec spec = ModelSpec::of(Family::rc_logit);
  spec.rc_dim = 2;
  const GaussianDraws draws(11, 12, 2);
  const Matrix z = draws.cell(1, 1);
  const Vector x = (Vector(2) << 0.7, -0.2).finished();
  const Vector theta = rc_pack((Vector(2) << 0.3, 0.9).finished(), 0.3 * Matrix::Identity(2, 2));
  const auto d = pi_derivatives(spec, 1.0, x, theta, 0.1, z);
  const auto b = cell_derivatives(spec, 1.0, x, theta, 0.1, z);
  CHECK(d.d1 == Catch::Approx(b.d_pi).margin(1e-14));
  CHECK(d.d2 == Catch::Approx(b.d_pi2).margin(1e-14));
}

TEST_CASE("quantile bandwidth default follows the panel size") {
  ModelSpec spec = ModelSpec::of(Family::smoothed_quantile);
  const auto panel = PanelData::fully_observed(Matrix::Zero(32, 8), {});
  const ModelSpec resolved = resolve_defaults(spec, panel);
  CHECK(resolved.bandwidth_h == Catch::Approx(std::pow(8.0, -0.2)).epsilon(1e-12));
}
