#pragma once

#include <any>
#include <cmath>
#include <optional>
#include <vector>

#include "lrpanel/admm.hpp"
#include "lrpanel/bias.hpp"
#include "lrpanel/loss.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/mm.hpp"
#include "lrpanel/panel.hpp"
#include "lrpanel/refine.hpp"
#include "lrpanel/tuning.hpp"

namespace lrpanel {

enum class BiasMode { none, abc, jbc, both };

/// End-to-end options: tune -> first step -> rank -> refine -> correction.
struct PipelineOptions {
  std::vector<double> nu_grid;           // empty selects the default grid
  std::optional<PenaltyRule> penalty;    // default: design1 rule for single-index,
                                         // design2 rule for rc_logit
  std::optional<double> fixed_nu;        // skip tuning and use this nu
  std::optional<int> fixed_rank;         // override the estimated rank
  AdmmOptions admm;
  MmOptions mm;
  RefineConfig refine;
  int trunc_L = -1;                      // <0 selects floor(T^(1/4))
  BiasMode bias = BiasMode::none;
  int jackknife_threads = 1;
};

struct PipelineResult {
  TuningResult tuning;
  FirstStepEstimate first;
  int r_hat = 0;
  SecondStepEstimate second;
  std::optional<RcLogitParams> rc_params;
  std::optional<BiasCorrectedResult> abc;
  std::optional<BiasCorrectedResult> jbc;

  /// Reported slope estimates: for rc_logit these are the beta_bar heads.
  Vector theta_first_report;
  Vector theta_second_report;
};

inline PenaltyRule pipeline_penalty(const ModelSpec& spec, const PipelineOptions& opts) {
  if (opts.penalty) return *opts.penalty;
  return spec.family == Family::rc_logit ? PenaltyRule::design2() : PenaltyRule::design1();
}

inline int pipeline_trunc_L(const PanelData& panel, const PipelineOptions& opts) {
  if (opts.trunc_L >= 0) return opts.trunc_L;
  return static_cast<int>(std::floor(std::pow(static_cast<double>(panel.T()), 0.25)));
}

/// Full estimation pipeline used by the simulation harness, the jackknife
/// halves, and the command-line front end.
inline PipelineResult run_pipeline(const PanelData& panel, const ModelSpec& spec_in,
                                   const PipelineOptions& opts = {}) {
  const ModelSpec spec = resolve_defaults(spec_in, panel);
  require_valid(panel, spec);
  const bool rc = spec.family == Family::rc_logit;

  PipelineResult out;
  const FirstStepSolver solver = rc ? mm_solver(opts.mm) : admm_solver(opts.admm);

  std::any payload;
  if (opts.fixed_nu) {
    SolverRun run = solver(panel, spec, *opts.fixed_nu, {});
    out.first = std::move(run.estimate);
    payload = std::move(run.payload);
    out.tuning.nu_star = *opts.fixed_nu;
    out.tuning.r_hat =
        estimate_rank(singular_values(out.first.Pi), panel.N(), panel.T(), *opts.fixed_nu);
    out.tuning.penalty = pipeline_penalty(spec, opts);
  } else {
    const std::vector<double> grid =
        opts.nu_grid.empty() ? default_nu_grid(panel.N(), panel.T()) : opts.nu_grid;
    auto tuned = detail::select_nu_impl(panel, spec, grid, pipeline_penalty(spec, opts), solver);
    out.tuning = std::move(tuned.result);
    out.first = std::move(tuned.best);
    payload = std::move(tuned.best_payload);
  }
  out.r_hat = out.tuning.r_hat;

  std::optional<GaussianDraws> draws;
  Vector theta_init;
  if (rc) {
    out.rc_params = std::any_cast<RcLogitParams>(std::move(payload));
    draws = out.rc_params->draws;
    theta_init = rc_pack(out.rc_params->beta_bar, out.rc_params->sigma_chol);
  } else {
    theta_init = out.first.theta;
  }

  const int rank = opts.fixed_rank ? *opts.fixed_rank : std::max(out.r_hat, 1);
  const FactorDecomposition factors =
      factorize_rank_r(out.first.Pi, std::min(rank, std::min(panel.N(), panel.T())));
  out.second = refine_iterative(panel, spec, theta_init, factors, opts.refine,
                                draws ? &*draws : nullptr);

  out.theta_first_report = rc ? Vector(out.first.theta.head(panel.p())) : out.first.theta;
  out.theta_second_report = rc ? Vector(out.second.theta.head(panel.p())) : out.second.theta;

  if (opts.bias == BiasMode::abc || opts.bias == BiasMode::both) {
    const auto comp = estimate_bias_components(panel, spec, out.second.theta, out.second.factors,
                                               pipeline_trunc_L(panel, opts),
                                               draws ? &*draws : nullptr);
    out.abc = analytic_correction(out.second.theta, comp, panel.N(), panel.T());
  }
  if (opts.bias == BiasMode::jbc || opts.bias == BiasMode::both) {
    PipelineOptions sub_opts = opts;
    sub_opts.bias = BiasMode::none;
    sub_opts.fixed_nu.reset();  // each half tunes its own penalty
    const PipelineFn handle = [&](const PanelData& sub) -> PipelineFit {
      auto fit = run_pipeline(sub, spec, sub_opts);
      return PipelineFit{fit.second.theta, fit.second.factors};
    };
    const PipelineFit full{out.second.theta, out.second.factors};
    out.jbc = jackknife_correction(panel, spec, handle, &full, draws ? &*draws : nullptr,
                                   opts.jackknife_threads);
  }
  return out;
}

}  // namespace lrpanel
