#pragma once

#include <vector>

#include "odeflow/control.hpp"
#include "odeflow/integrate.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

enum class ObjectiveKind { Regression, CnfNll };

// What the optimizer minimizes.
//
// Regression: J = dt * sum_{k=1..n} 1/2 ||y(t_k) - u_k||^2, averaged over
// the batch.  Targets sit on the uniform data clock t_k = k*dt; column k of
// `targets` is u_k and column 0 (the initial condition) carries no loss.
//
// CnfNll: J = n_f/2 log(2 pi) + mean_b [ 1/2 ||y_b(T)||^2 + g_b(T) ],
// the negative log-likelihood of samples pulled back to a standard normal
// by the flow, with g the accumulated negative divergence.
//
// Both may add the Tikhonov control penalty alpha/2 * int_0^T ||theta||^2.
struct Objective {
  ObjectiveKind kind = ObjectiveKind::Regression;
  Mat targets;       // n_f x (n+1), regression only
  double dt = 0.0;   // data spacing = quadrature weight, regression only
  double alpha = 0.0;

  static Objective regression(const Mat& targets, double dt,
                              double alpha = 0.0);
  static Objective cnf(double alpha = 0.0);
};

// Times carrying a loss term, t_k = k*dt for k = 1..n.
std::vector<double> target_times(const Objective& obj);

// Data-fit term evaluated on a solve record.  Fixed-step records must have
// every target time on a step node; adaptive records interpolate densely.
double regression_loss(const SolveRecord& rec, const Objective& obj);

// Negative log-likelihood of a record carrying the log-density channel.
double cnf_nll(const SolveRecord& rec);

// Data-fit term of either kind (no regularizer).
double data_loss(const SolveRecord& rec, const Objective& obj);

// Control regularizer alpha/2 * int_0^T ||theta(t)||^2 dt under the grid's
// piecewise-linear interpolation, and its gradient in flat layout.
double tikhonov(const ControlGrid& grid, double alpha);
Vec tikhonov_grad(const ControlGrid& grid, double alpha);

// ---------------------------------------------------------------------------
// Cotangent seeds for the gradient engines.
// ---------------------------------------------------------------------------

// For fixed-step records: target index at each step node (-1 when the node
// carries no loss term).  Throws when a target misses every node.
std::vector<int> regression_step_targets(const SolveRecord& rec,
                                         const Objective& obj);

// d(data term)/d y(t_k) = dt * (y - u_k) / B for target column k.
Mat regression_cotangent(const Mat& Y, const Objective& obj, int target);

// d(NLL)/d terminal augmented state: [y(T)/B ; 1/B].
Mat cnf_terminal_cotangent(const SolveRecord& rec);

}  // namespace odeflow
