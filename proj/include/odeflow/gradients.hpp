#pragma once

#include "odeflow/control.hpp"
#include "odeflow/integrate.hpp"
#include "odeflow/objectives.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

// Result of one gradient evaluation.  `grad` uses the grid's flat layout.
struct GradientReport {
  Vec grad;
  double loss = 0.0;      // objective at the evaluation point (incl. penalty)
  long forward_nfe = 0;   // velocity evaluations spent on the forward solve
  long backward_nfe = 0;  // field/contraction evaluations spent going back
};

// Exact gradient of the discrete objective by reverse sweep through the
// recorded solver steps (stage inputs are rebuilt bit-for-bit from the
// stored stage derivatives).  The record must come from a fixed-step solve
// with stages stored; both objective kinds are supported, the log-density
// channel is pulled back with exact second-order contractions.
GradientReport discopt_grad(const ControlGrid& grid, const SolveRecord& rec,
                            const Objective& obj);

// The backward-Euler discretization of the continuous adjoint on the same
// step grid: identical to the exact sweep except every field/loss pullback
// is evaluated one node later, i.e. step j uses (theta_{j+1}, y_{j+1},
// t_{j+1}) where the exact sweep uses (theta_j, y_j, t_j).  The gap between
// the two shrinks linearly with h.  Record must be a stored euler solve.
GradientReport backward_euler_adjoint_grad(const ControlGrid& grid,
                                           const SolveRecord& rec,
                                           const Objective& obj);

struct OptDiscOptions {
  SolverConfig forward;      // typically adaptive
  SolverConfig backward;     // adjoint solver
  bool use_stored_trajectory = false;  // interpolate y(t) from the forward
                                       // record instead of re-integrating it
  TraceMode trace = TraceMode::Exact;  // log-density channel only
  Mat eps;                             // Hutchinson probes (empty = none)
};

// Optimize-then-discretize gradient: solve forward, then integrate the
// continuous adjoint backward (jointly with the state unless the stored
// trajectory is reused), applying loss jumps at target times and
// accumulating the control gradient with a trapezoid rule on the adjoint
// solver's accepted steps.  The returned loss is the forward objective.
GradientReport optdisc_grad(const ControlGrid& grid, const Mat& Y0, double T,
                            const Objective& obj, const OptDiscOptions& opt);

// Negative log-likelihood gradient from a stored log-density solve;
// convenience wrapper over the exact reverse sweep.
GradientReport cnf_grad(const ControlGrid& grid, const SolveRecord& rec,
                        double alpha = 0.0);

}  // namespace odeflow
