#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "lrpanel/panel.hpp"

namespace lrpanel {

/// Numerical failure inside an estimation loop (divergence, exhausted
/// iterations on a required subproblem, singular information matrix).
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// First-step regularized estimate with convergence diagnostics.
struct FirstStepEstimate {
  Vector theta;       // slope estimate; for rc_logit this is beta_bar
  Matrix Pi;          // N×T interactive-effects estimate
  double nu = 0.0;    // penalty level used
  double objective = 0.0;  // penalized objective at the returned iterate
  double primal_res = 0.0;
  double dual_res = 0.0;
  int iters = 0;
  bool converged = false;
  std::vector<double> objective_path;  // penalized objective per iteration
  std::vector<std::string> warnings;
};

}  // namespace lrpanel
