#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lrpanel/montecarlo.hpp"
#include "lrpanel/tuning.hpp"

using namespace lrpanel;

namespace {

PanelData design1_panel(int N, int T, std::uint64_t seed) {
  DesignConfig cfg;
  cfg.N = N;
  cfg.T = T;
  cfg.seed = seed;
  return generate(cfg).first;
}

}  // namespace

TEST_CASE("rank rule counts singular values over the threshold") {
  Vector sigma(3);
  sigma << 50.0, 30.0, 0.1;
  CHECK(estimate_rank(sigma, 1, 1, 1.0) == 2);  // NT*nu = 1
  CHECK(estimate_rank(sigma, 10, 10, 1.0) == 0);  // NT*nu = 100 above all
  CHECK(estimate_rank(Vector(0), 5, 5, 0.1) == 0);
}

TEST_CASE("rank rule ignores numerically zero singular values") {
  Vector sigma(3);
  sigma << 10.0, 5e-10, 3e-10;
  // threshold below everything, but the trailing values are below 1e-10*sigma1
  CHECK(estimate_rank(sigma, 2, 2, 1e-12) == 1);
}

TEST_CASE("rank rule is monotone non-increasing in the penalty") {
  Vector sigma(5);
  sigma << 40.0, 25.0, 9.0, 2.0, 0.5;
  int prev = estimate_rank(sigma, 10, 10, 1e-4);
  for (double nu : {1e-3, 1e-2, 0.05, 0.1, 0.3, 1.0}) {
    const int r = estimate_rank(sigma, 10, 10, nu);
    CHECK(r <= prev);
    prev = r;
  }
}

TEST_CASE("penalty magnitudes match the stated formulas") {
  // 0.5*log(100)*100/10000 and 0.5*log(log(100))/100, evaluated directly
  CHECK(default_penalty(PenaltyRule::design1(), 100, 100) ==
        Catch::Approx(0.5 * std::log(100.0) * 100.0 / 10000.0).epsilon(1e-14));
  CHECK(default_penalty(PenaltyRule::design1(), 100, 100) ==
        Catch::Approx(0.023026).margin(1e-6));
  CHECK(default_penalty(PenaltyRule::design2(), 100, 100) ==
        Catch::Approx(0.5 * std::log(std::log(100.0)) / 100.0).epsilon(1e-14));
  CHECK(default_penalty(PenaltyRule::design2(), 100, 100) ==
        Catch::Approx(0.0076352).margin(1e-6));
  CHECK(default_penalty(PenaltyRule::design1(), 150, 100) ==
        Catch::Approx(0.5 * std::log(100.0) * 150.0 / 15000.0).epsilon(1e-14));
  CHECK(default_penalty(PenaltyRule::custom(0.31), 7, 9) == 0.31);
}

TEST_CASE("loglog penalty rejects tiny panels") {
  CHECK_THROWS_AS(default_penalty(PenaltyRule::design2(), 2, 2), std::domain_error);
}

TEST_CASE("default grid spans the stated range") {
  const auto grid = default_nu_grid(100, 100);
  REQUIRE(grid.size() == 20);
  const double scale = 20.0 / 10000.0;
  CHECK(grid.front() == Catch::Approx(0.01 * scale).epsilon(1e-12));
  CHECK(grid.back() == Catch::Approx(2.0 * scale).epsilon(1e-12));
  for (std::size_t k = 1; k < grid.size(); ++k) CHECK(grid[k] > grid[k - 1]);
}

TEST_CASE("a single-point grid selects that point") {
  const auto panel = design1_panel(12, 12, 3);
  const auto result = select_nu(panel, ModelSpec::of(Family::binary_logit), {0.004},
                                PenaltyRule::design1(), admm_solver());
  CHECK(result.nu_star == 0.004);
  REQUIRE(result.ic_path.size() == 1);
  CHECK_FALSE(result.ic_path[0].failed);
}

TEST_CASE("selection is invariant to grid order") {
  const auto panel = design1_panel(14, 12, 9);
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const std::vector<double> ascending{0.001, 0.003, 0.01, 0.03};
  const std::vector<double> shuffled{0.01, 0.001, 0.03, 0.003};
  const auto a = select_nu(panel, spec, ascending, PenaltyRule::design1(), admm_solver());
  const auto b = select_nu(panel, spec, shuffled, PenaltyRule::design1(), admm_solver());
  CHECK(a.nu_star == b.nu_star);
  CHECK(a.r_hat == b.r_hat);
  REQUIRE(a.ic_path.size() == b.ic_path.size());
  for (std::size_t g = 0; g < a.ic_path.size(); ++g)
    CHECK(a.ic_path[g].nu == b.ic_path[g].nu);
}

TEST_CASE("the selected point minimizes the criterion with ties to smaller nu") {
  const auto panel = design1_panel(16, 16, 21);
  const auto grid = default_nu_grid(16, 16, 8);
  const auto result = select_nu(panel, ModelSpec::of(Family::binary_logit), grid,
                                PenaltyRule::design1(), admm_solver());
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : result.ic_path)
    if (!e.failed) best = std::min(best, e.ic);
  bool found = false;
  for (const auto& e : result.ic_path) {
    if (e.failed || e.nu != result.nu_star) continue;
    found = true;
    CHECK(e.ic == best);
  }
  CHECK(found);
  // no smaller nu attains the same criterion value
  for (const auto& e : result.ic_path)
    if (!e.failed && e.ic == best) CHECK(e.nu >= result.nu_star);
}

TEST_CASE("reported rank matches the rank rule applied to the selected estimate") {
  const auto panel = design1_panel(20, 18, 33);
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  const auto grid = default_nu_grid(20, 18, 10);
  const auto outcome = detail::select_nu_impl(panel, spec, grid, PenaltyRule::design1(),
                                              admm_solver());
  CHECK(outcome.result.r_hat == estimate_rank(singular_values(outcome.best.Pi), 20, 18,
                                              outcome.result.nu_star));
  CHECK(outcome.best.nu == outcome.result.nu_star);
}

TEST_CASE("empty and non-positive grids are rejected") {
  const auto panel = design1_panel(8, 8, 1);
  const ModelSpec spec = ModelSpec::of(Family::binary_logit);
  CHECK_THROWS_AS(select_nu(panel, spec, {}, PenaltyRule::design1(), admm_solver()),
                  std::invalid_argument);
  CHECK_THROWS_AS(select_nu(panel, spec, {0.01, -0.1}, PenaltyRule::design1(), admm_solver()),
                  std::invalid_argument);
}

TEST_CASE("a solver that always fails produces a tuning error listing points") {
  const auto panel = design1_panel(8, 8, 2);
  const FirstStepSolver failing = [](const PanelData&, const ModelSpec&, double,
                                     const std::any&) -> SolverRun {
    throw SolverError("synthetic failure");
  };
  try {
    select_nu(panel, ModelSpec::of(Family::binary_logit), {0.01, 0.02}, PenaltyRule::design1(),
              failing);
    FAIL("expected a tuning error");
  } catch (const TuningError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("synthetic failure") != std::string::npos);
    CHECK(msg.find("0.01") != std::string::npos);
    CHECK(msg.find("0.02") != std::string::npos);
  }
}
