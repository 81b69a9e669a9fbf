// Command-line front end: simulate | tune | estimate | refine | bias-correct | mc.
//
// Every command is a pure function of (config, input files, seed): repeated
// runs write byte-identical outputs. Exit codes: 0 success, 1 validation
// error, 2 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lrpanel/lrpanel.hpp"

namespace {

using namespace lrpanel;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

struct CliConfig {
  std::string input;
  std::string output;
  std::string init;  // upstream result file for refine / bias-correct
  std::string model = "logit";
  double tau = 0.5;
  double bandwidth = 0.0;
  int draws = 200;
  double nu = 0.0;
  std::string nu_grid;  // comma-separated overrides
  std::string penalty = "auto";  // design1 | design2 | custom=V | auto
  int rank = 0;
  double radius_c = 2.0;
  int trunc_L = -1;
  std::string method = "abc";
  int design = 1;
  int dgp = 1;
  int N = 100;
  int T = 100;
  int S = 50;
  std::uint64_t seed = 1;
  int threads = hardware_workers();
};

ModelSpec spec_from(const CliConfig& c) {
  ModelSpec spec;
  if (c.model == "linear")
    spec.family = Family::linear;
  else if (c.model == "logit")
    spec.family = Family::binary_logit;
  else if (c.model == "probit")
    spec.family = Family::binary_probit;
  else if (c.model == "quantile")
    spec.family = Family::smoothed_quantile;
  else if (c.model == "rclogit")
    spec.family = Family::rc_logit;
  else
    throw std::invalid_argument("unknown model: " + c.model);
  spec.tau = c.tau;
  spec.bandwidth_h = c.bandwidth;
  spec.draws_R = c.draws;
  spec.draw_seed = c.seed;
  return spec;
}

std::optional<PenaltyRule> penalty_from(const CliConfig& c) {
  if (c.penalty == "auto") return std::nullopt;
  if (c.penalty == "design1") return PenaltyRule::design1();
  if (c.penalty == "design2") return PenaltyRule::design2();
  if (c.penalty.rfind("custom=", 0) == 0)
    return PenaltyRule::custom(std::stod(c.penalty.substr(7)));
  throw std::invalid_argument("unknown penalty rule: " + c.penalty);
}

PipelineOptions pipeline_from(const CliConfig& c) {
  PipelineOptions opts;
  opts.penalty = penalty_from(c);
  if (c.nu > 0.0) opts.fixed_nu = c.nu;
  if (!c.nu_grid.empty()) {
    std::stringstream ss(c.nu_grid);
    std::string tok;
    while (std::getline(ss, tok, ',')) opts.nu_grid.push_back(std::stod(tok));
  }
  if (c.rank > 0) opts.fixed_rank = c.rank;
  opts.refine.c_radius = c.radius_c;
  opts.trunc_L = c.trunc_L;
  opts.mm.R = c.draws;
  opts.mm.seed = c.seed;
  return opts;
}

PanelData load_panel(const CliConfig& c, const ModelSpec& spec) {
  if (c.input.empty()) throw std::invalid_argument("--input is required");
  PanelData panel = read_panel_csv(c.input);
  const auto report = validate(panel, resolve_defaults(spec, panel));
  if (!report.empty()) {
    std::string msg = "panel validation failed:";
    for (const auto& v : report) msg += "\n  " + v;
    throw std::invalid_argument(msg);
  }
  return panel;
}

DesignConfig design_from(const CliConfig& c) {
  DesignConfig cfg;
  cfg.design = c.design == 2 ? Design::design2 : Design::design1;
  cfg.dgp = c.dgp == 2 ? Dgp::ar1 : Dgp::iid;
  cfg.N = c.N;
  cfg.T = c.T;
  cfg.seed = c.seed;
  return cfg;
}

int cmd_simulate(const CliConfig& c) {
  if (c.output.empty()) throw std::invalid_argument("--output is required");
  auto [panel, truth] = generate(design_from(c));
  write_panel_csv(c.output, panel);
  write_results(c.output + ".truth.json", to_json(truth));
  std::printf("simulate: wrote %dx%d panel (%d covariates) to %s\n", panel.N(), panel.T(),
              panel.p(), c.output.c_str());
  return kExitOk;
}

int cmd_tune(const CliConfig& c) {
  const ModelSpec spec = spec_from(c);
  const PanelData panel = load_panel(c, spec);
  PipelineOptions opts = pipeline_from(c);
  const auto grid = opts.nu_grid.empty() ? default_nu_grid(panel.N(), panel.T()) : opts.nu_grid;
  const ModelSpec resolved = resolve_defaults(spec, panel);
  const PenaltyRule rule = opts.penalty ? *opts.penalty
                           : resolved.family == Family::rc_logit ? PenaltyRule::design2()
                                                                 : PenaltyRule::design1();
  const FirstStepSolver solver =
      resolved.family == Family::rc_logit ? mm_solver(opts.mm) : admm_solver(opts.admm);
  const TuningResult result = select_nu(panel, resolved, grid, rule, solver);
  if (!c.output.empty()) write_results(c.output, to_json(result));
  std::printf("tune: nu_star = %.8g, r_hat = %d (%zu grid points)\n", result.nu_star,
              result.r_hat, result.ic_path.size());
  return kExitOk;
}

int cmd_estimate(const CliConfig& c) {
  const ModelSpec spec = spec_from(c);
  const PanelData panel = load_panel(c, spec);
  PipelineOptions opts = pipeline_from(c);
  const ModelSpec resolved = resolve_defaults(spec, panel);

  FirstStepEstimate first;
  double nu_used = 0.0;
  if (opts.fixed_nu) {
    nu_used = *opts.fixed_nu;
    if (resolved.family == Family::rc_logit) {
      first = estimate_nnr_mm(panel, resolved, nu_used, opts.mm).first;
    } else {
      first = estimate_nnr_admm(panel, resolved, nu_used, opts.admm);
    }
  } else {
    PipelineOptions tuned = opts;
    tuned.bias = BiasMode::none;
    const auto fit = run_pipeline(panel, resolved, tuned);
    first = fit.first;
    nu_used = fit.tuning.nu_star;
  }
  json record = to_json(first);
  record["model"] = c.model;
  record["r_hat"] = estimate_rank(singular_values(first.Pi), panel.N(), panel.T(), nu_used);
  if (!c.output.empty()) write_results(c.output, record);
  std::printf("estimate: nu = %.8g, objective = %.8g, iters = %d, converged = %s\n", nu_used,
              first.objective, first.iters, first.converged ? "yes" : "no");
  return kExitOk;
}

int cmd_refine(const CliConfig& c) {
  const ModelSpec spec = spec_from(c);
  const PanelData panel = load_panel(c, spec);
  if (c.init.empty()) throw std::invalid_argument("--init (first-step result file) is required");
  const json init = read_results(c.init);
  FirstStepEstimate first = first_step_from_json(init);
  const ModelSpec resolved = resolve_defaults(spec, panel);

  int rank = c.rank;
  if (rank <= 0)
    rank = std::max(estimate_rank(singular_values(first.Pi), panel.N(), panel.T(), first.nu), 1);
  const FactorDecomposition factors = factorize_rank_r(first.Pi, rank);

  RefineConfig cfg;
  cfg.c_radius = c.radius_c;
  SecondStepEstimate second;
  std::optional<GaussianDraws> draws;
  if (resolved.family == Family::rc_logit) {
    throw std::invalid_argument(
        "refine from a serialized rclogit first step is not supported; use the mc command "
        "or run estimate+refine in one process");
  }
  second = refine_iterative(panel, resolved, first.theta, factors, cfg);

  json record = to_json(second);
  record["init_file"] = c.init;
  record["input_file"] = c.input;
  record["rank"] = rank;
  if (!c.output.empty()) write_results(c.output, record);
  std::printf("refine: rank = %d, outer iters = %d, converged = %s\n", rank, second.outer_iters,
              second.converged ? "yes" : "no");
  return kExitOk;
}

int cmd_bias_correct(const CliConfig& c) {
  const ModelSpec spec = spec_from(c);
  const PanelData panel = load_panel(c, spec);
  if (c.init.empty()) throw std::invalid_argument("--init (second-step result file) is required");
  const ModelSpec resolved = resolve_defaults(spec, panel);
  if (resolved.family == Family::rc_logit)
    throw std::invalid_argument("bias-correct on serialized rclogit results is not supported");
  const SecondStepEstimate second = second_step_from_json(read_results(c.init));

  BiasCorrectedResult result;
  if (c.method == "abc") {
    const int L = c.trunc_L >= 0
                      ? c.trunc_L
                      : static_cast<int>(std::floor(std::pow(double(panel.T()), 0.25)));
    const auto comp = estimate_bias_components(panel, resolved, second.theta, second.factors, L);
    result = analytic_correction(second.theta, comp, panel.N(), panel.T());
  } else if (c.method == "jbc") {
    PipelineOptions opts = pipeline_from(c);
    opts.bias = BiasMode::none;
    opts.fixed_nu.reset();
    const PipelineFn handle = [&](const PanelData& sub) -> PipelineFit {
      const auto fit = run_pipeline(sub, resolved, opts);
      return PipelineFit{fit.second.theta, fit.second.factors};
    };
    const PipelineFit full{second.theta, second.factors};
    result = jackknife_correction(panel, resolved, handle, &full, nullptr, c.threads);
  } else {
    throw std::invalid_argument("unknown --method: " + c.method + " (use abc or jbc)");
  }

  json record = to_json(result);
  record["init_file"] = c.init;
  if (!c.output.empty()) write_results(c.output, record);
  std::printf("bias-correct (%s): theta_corrected =", c.method.c_str());
  for (int k = 0; k < result.theta_corrected.size(); ++k)
    std::printf(" %.6f", result.theta_corrected[k]);
  std::printf("\n");
  return kExitOk;
}

int cmd_mc(const CliConfig& c) {
  DesignConfig cfg = design_from(c);
  McOptions opts;
  opts.S = c.S;
  opts.threads = c.threads;
  opts.pipeline = pipeline_from(c);
  if (c.method == "abc") opts.pipeline.bias = BiasMode::abc;
  else if (c.method == "jbc") opts.pipeline.bias = BiasMode::jbc;
  else if (c.method == "both") opts.pipeline.bias = BiasMode::both;
  const McSummary summary = run_replications(cfg, opts);

  const std::string table = mc_table_csv({mc_table_row(cfg, summary)});
  if (!c.output.empty()) {
    std::ofstream out(c.output);
    out << table;
    write_results(c.output + ".seeds.json", to_json(summary));
  }
  std::fputs(table.c_str(), stdout);
  if (summary.failures > 0)
    std::printf("mc: %d of %d replications failed\n", summary.failures, summary.replications);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-step low-rank panel estimation"};
  app.set_config("--config", "", "Flat key = value configuration file");
  app.require_subcommand(1);

  CliConfig c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--input", c.input, "Input panel CSV");
    sub->add_option("--output", c.output, "Output file");
    sub->add_option("--init", c.init, "Upstream result file");
    sub->add_option("--model", c.model, "linear|logit|quantile|probit|rclogit");
    sub->add_option("--tau", c.tau, "Quantile level");
    sub->add_option("--bandwidth", c.bandwidth, "Quantile smoothing bandwidth");
    sub->add_option("--draws", c.draws, "Simulation draws R for rclogit");
    sub->add_option("--nu", c.nu, "Fixed penalty level (skips tuning)");
    sub->add_option("--nu-grid", c.nu_grid, "Comma-separated penalty grid");
    sub->add_option("--penalty", c.penalty, "design1|design2|custom=V|auto");
    sub->add_option("--rank", c.rank, "Fixed rank for refinement");
    sub->add_option("--radius-c", c.radius_c, "Localization radius constant");
    sub->add_option("--trunc-L", c.trunc_L, "Serial-correlation truncation lag");
    sub->add_option("--method", c.method, "abc|jbc (bias correction)");
    sub->add_option("--design", c.design, "Simulation design (1 or 2)");
    sub->add_option("--dgp", c.dgp, "Covariate process (1 iid, 2 AR(1))");
    sub->add_option("--N", c.N, "Cross-section size");
    sub->add_option("--T", c.T, "Time-series size");
    sub->add_option("--S", c.S, "Replications");
    sub->add_option("--seed", c.seed, "Master seed");
    sub->add_option("--threads", c.threads, "Worker pool size");
  };

  auto* simulate = app.add_subcommand("simulate", "Draw a panel from a simulation design");
  auto* tune = app.add_subcommand("tune", "Select the penalty level by information criterion");
  auto* estimate = app.add_subcommand("estimate", "First-step regularized estimation");
  auto* refine = app.add_subcommand("refine", "Second-step iterative refinement");
  auto* bias = app.add_subcommand("bias-correct", "Analytic or jackknife bias correction");
  auto* mc = app.add_subcommand("mc", "Replicated simulation study");
  for (auto* sub : {simulate, tune, estimate, refine, bias, mc}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(c);
    if (tune->parsed()) return cmd_tune(c);
    if (estimate->parsed()) return cmd_estimate(c);
    if (refine->parsed()) return cmd_refine(c);
    if (bias->parsed()) return cmd_bias_correct(c);
    if (mc->parsed()) return cmd_mc(c);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const lrpanel::ParseError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  }
  return kExitOk;
}
