#pragma once

// Umbrella header: two-step estimation of nonlinear panel models with a
// low-rank interactive-effects component.

#include "lrpanel/admm.hpp"
#include "lrpanel/bias.hpp"
#include "lrpanel/estimates.hpp"
#include "lrpanel/io.hpp"
#include "lrpanel/loss.hpp"
#include "lrpanel/lowrank.hpp"
#include "lrpanel/mm.hpp"
#include "lrpanel/montecarlo.hpp"
#include "lrpanel/panel.hpp"
#include "lrpanel/parallel.hpp"
#include "lrpanel/pipeline.hpp"
#include "lrpanel/refine.hpp"
#include "lrpanel/rng.hpp"
#include "lrpanel/tuning.hpp"
