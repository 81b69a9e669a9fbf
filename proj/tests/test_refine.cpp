#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lrpanel/montecarlo.hpp"
#include "lrpanel/refine.hpp"
#include "lrpanel/rng.hpp"

using namespace lrpanel;

namespace {

Matrix random_matrix(int n, int m, std::uint64_t seed, double scale = 1.0) {
  const CounterRng rng(seed, 29);
  Matrix A(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      A(i, j) = scale * rng.normal(static_cast<std::uint64_t>(i) * m + j);
  return A;
}

// Noiseless linear panel y = x'theta0 + Lambda0 F0' with a rank-2 component.
struct LinearInstance {
  PanelData panel;
  Vector theta0;
  FactorDecomposition truth;
};

LinearInstance noiseless_linear(int N, int T, std::uint64_t seed, double noise = 0.0) {
  LinearInstance out;
  out.theta0 = (Vector(2) << 1.0, -0.5).finished();
  const Matrix Pi0 = random_matrix(N, 2, seed) * random_matrix(T, 2, seed + 1).transpose();
  out.truth = factorize_rank_r(Pi0, 2);
  std::vector<Matrix> X{random_matrix(N, T, seed + 2), random_matrix(N, T, seed + 3)};
  Matrix Y = out.theta0[0] * X[0] + out.theta0[1] * X[1] + Pi0;
  if (noise > 0.0) Y += random_matrix(N, T, seed + 4, noise);
  out.panel = PanelData::fully_observed(Y, X);
  return out;
}

}  // namespace

TEST_CASE("starting at the truth on noiseless data stays put") {
  const auto inst = noiseless_linear(12, 10, 5);
  const auto second = refine_iterative(inst.panel, ModelSpec::of(Family::linear), inst.theta0,
                                       inst.truth);
  for (const auto& th : second.theta_path)
    CHECK((th - inst.theta0).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(second.converged);
}

TEST_CASE("a zero radius returns the initial point exactly") {
  const auto inst = noiseless_linear(8, 8, 6, 0.3);
  const Vector init_theta = (Vector(2) << 0.4, 0.1).finished();
  RefineConfig cfg;
  cfg.gamma_nt = 1.0;
  cfg.c_radius = 0.0;  // degenerate balls
  const auto second =
      refine_iterative(inst.panel, ModelSpec::of(Family::linear), init_theta, inst.truth, cfg);
  CHECK(second.theta == init_theta);
  CHECK_FALSE(second.converged);
  CHECK(second.outer_iters == 0);
  REQUIRE(second.theta_path.size() == 1);
  CHECK_FALSE(second.message.empty());
}

TEST_CASE("factor update has the scalar closed form when r = 1 and T = 1") {
  // one column, rank one: lambda_i = (y_i1 - x,theta) / f_1
  const int N = 6;
  Matrix Y(N, 1), X1(N, 1);
  for (int i = 0; i < N; ++i) {
    Y(i, 0) = 0.3 * i - 1.0;
    X1(i, 0) = 0.5 + 0.1 * i;
  }
  PanelData panel = PanelData::fully_observed(Y, {X1});
  const Vector theta = (Vector(1) << 0.8).finished();

  FactorDecomposition start;
  start.r = 1;
  start.Lambda = Matrix::Zero(N, 1);
  start.F = Matrix::Ones(1, 1);  // f_1 = 1 satisfies F'F/T = 1

  const double inf = std::numeric_limits<double>::infinity();
  const auto updated = update_factors(panel, ModelSpec::of(Family::linear), theta, start, inf,
                                      inf, 1);
  // reconstruction must match the residual exactly
  for (int i = 0; i < N; ++i) {
    const double expected = Y(i, 0) - X1(i, 0) * theta[0];
    CHECK(updated.Lambda(i, 0) * updated.F(0, 0) == Catch::Approx(expected).margin(1e-10));
  }
}

TEST_CASE("factor update never increases the loss on a convex family") {
  DesignConfig cfg;
  cfg.N = 15;
  cfg.T = 13;
  cfg.seed = 77;
  const auto panel = generate(cfg).first;
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const Vector theta = (Vector(3) << 0.7, 0.9, 1.1).finished();
  FactorDecomposition factors = factorize_rank_r(random_matrix(15, 13, 9, 0.5), 2);
  const double inf = std::numeric_limits<double>::infinity();
  for (int call = 0; call < 5; ++call) {
    const double before = aggregate_loss(spec, panel, theta, factors.reconstruct());
    factors = update_factors(panel, spec, theta, factors, inf, inf, 1);
    const double after = aggregate_loss(spec, panel, theta, factors.reconstruct());
    CHECK(after <= before + 1e-10);
  }
}

TEST_CASE("factor updates keep the normalization invariants") {
  DesignConfig cfg;
  cfg.N = 14;
  cfg.T = 11;
  cfg.seed = 3;
  const auto panel = generate(cfg).first;
  const auto factors =
      update_factors(panel, ModelSpec::of(Family::binary_logit),
                     (Vector(3) << 1.0, 1.0, 1.0).finished(),
                     factorize_rank_r(random_matrix(14, 11, 2), 2), 10.0, 10.0, 2);
  const Matrix FtF = factors.F.transpose() * factors.F / 11.0;
  CHECK((FtF - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);
  const Matrix LtL = factors.Lambda.transpose() * factors.Lambda / 14.0;
  CHECK(std::abs(LtL(0, 1)) < 1e-8);
  CHECK(LtL(0, 0) >= LtL(1, 1) - 1e-12);
}

TEST_CASE("theta update returns the previous point at a stationary input") {
  const auto inst = noiseless_linear(9, 9, 11);
  const Vector got = update_theta(inst.panel, ModelSpec::of(Family::linear), inst.truth,
                                  inst.theta0, 1.0);
  CHECK(got == inst.theta0);
}

TEST_CASE("theta update solves the partialled least squares exactly") {
  const auto inst = noiseless_linear(10, 8, 13, 0.4);
  const ModelSpec spec = ModelSpec::of(Family::linear);
  const Vector start = Vector::Zero(2);
  const double inf = std::numeric_limits<double>::infinity();
  const Vector got = update_theta(inst.panel, spec, inst.truth, start, inf);

  // direct normal equations of y - pi on x
  const Matrix Pi = inst.truth.reconstruct();
  Matrix gram = Matrix::Zero(2, 2);
  Vector rhs = Vector::Zero(2);
  for (int i = 0; i < 10; ++i)
    for (int t = 0; t < 8; ++t) {
      const Vector x = inst.panel.x_at(i, t);
      gram += x * x.transpose();
      rhs += x * (inst.panel.Y(i, t) - Pi(i, t));
    }
  const Vector ols = gram.ldlt().solve(rhs);
  CHECK((got - ols).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("a binding radius clips to the ball boundary") {
  const auto inst = noiseless_linear(10, 8, 17, 0.4);
  const Vector start = Vector::Zero(2);
  const double inf = std::numeric_limits<double>::infinity();
  const Vector full = update_theta(inst.panel, ModelSpec::of(Family::linear), inst.truth, start,
                                   inf);
  const double radius = 0.25 * full.norm();
  int clips = 0;
  const Vector clipped = update_theta(inst.panel, ModelSpec::of(Family::linear), inst.truth,
                                      start, radius, nullptr, &clips);
  CHECK(clips == 1);
  CHECK(clipped.norm() == Catch::Approx(radius).epsilon(1e-12));
  // clipped point lies on the segment toward the unconstrained solution
  CHECK((clipped / clipped.norm() - full / full.norm()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("with wide balls the refinement matches plain alternating least squares") {
  const auto inst = noiseless_linear(30, 30, 23, 0.5);
  const ModelSpec spec = ModelSpec::of(Family::linear);

  // independent oracle: unconstrained alternating least squares
  Vector theta = Vector::Zero(2);
  Matrix Lambda = inst.truth.Lambda, F = inst.truth.F;
  for (int sweep = 0; sweep < 600; ++sweep) {
    Matrix resid = inst.panel.Y - Lambda * F.transpose();
    Matrix gram = Matrix::Zero(2, 2);
    Vector rhs = Vector::Zero(2);
    for (int i = 0; i < 30; ++i)
      for (int t = 0; t < 30; ++t) {
        const Vector x = inst.panel.x_at(i, t);
        gram += x * x.transpose();
        rhs += x * resid(i, t);
      }
    theta = gram.ldlt().solve(rhs);
    Matrix partial = inst.panel.Y - theta[0] * inst.panel.X[0] - theta[1] * inst.panel.X[1];
    // row and column regressions
    for (int i = 0; i < 30; ++i)
      Lambda.row(i) = (F.transpose() * F).ldlt().solve(F.transpose() *
                                                       partial.row(i).transpose());
    for (int t = 0; t < 30; ++t)
      F.row(t) = (Lambda.transpose() * Lambda)
                     .ldlt()
                     .solve(Lambda.transpose() * partial.col(t));
  }

  RefineConfig cfg;
  cfg.gamma_nt = 1e6;  // effectively unconstrained
  cfg.max_outer = 200;
  cfg.tol_theta = 1e-12;
  const auto second = refine_iterative(inst.panel, spec, Vector::Zero(2), inst.truth, cfg);
  CHECK((second.theta - theta).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(second.clip_events == 0);
}

TEST_CASE("refinement improves a perturbed start on a logit design") {
  DesignConfig cfg;
  cfg.N = 40;
  cfg.T = 40;
  cfg.seed = 31;
  auto [panel, truth] = generate(cfg);
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const Vector start = 0.6 * truth.theta0;
  const auto init = factorize_rank_r(truth.Pi0, 2);
  const auto second = refine_iterative(panel, spec, start, init);
  CHECK((second.theta - truth.theta0).norm() < (start - truth.theta0).norm());
  REQUIRE(second.theta_path.size() == static_cast<std::size_t>(second.outer_iters) + 1);
}

TEST_CASE("rc refinement runs with frozen draws and does not worsen the fit") {
  DesignConfig cfg;
  cfg.design = Design::design2;
  cfg.N = 15;
  cfg.T = 15;
  cfg.seed = 8;
  const auto panel = generate(cfg).first;
  ModelSpec spec = ModelSpec::of(Family::rc_logit);
  spec.rc_dim = 3;
  spec.draws_R = 16;
  const GaussianDraws draws(42, 16, 3);

  const Vector theta0 = rc_pack((Vector(3) << 0.5, 0.5, 0.5).finished(),
                                0.3 * Matrix::Identity(3, 3));
  const auto init = factorize_rank_r(0.2 * random_matrix(15, 15, 4), 2);
  RefineConfig rcfg;
  rcfg.max_outer = 4;
  const auto second = refine_iterative(panel, spec, theta0, init, rcfg, &draws);
  const double before = aggregate_loss(spec, panel, theta0, init.reconstruct(), draws);
  const double after =
      aggregate_loss(spec, panel, second.theta, second.factors.reconstruct(), draws);
  CHECK(after <= before + 1e-10);
  CHECK(second.theta.size() == rc_theta_dim(3));
}

TEST_CASE("rank zero initialization is rejected") {
  const auto inst = noiseless_linear(8, 8, 2);
  FactorDecomposition empty;
  empty.r = 0;
  empty.Lambda = Matrix::Zero(8, 0);
  empty.F = Matrix::Zero(8, 0);
  CHECK_THROWS_AS(
      refine_iterative(inst.panel, ModelSpec::of(Family::linear), inst.theta0, empty),
      std::invalid_argument);
}
