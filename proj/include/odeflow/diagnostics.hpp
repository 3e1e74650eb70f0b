#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "odeflow/gradients.hpp"
#include "odeflow/objectives.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

// ---------------------------------------------------------------------------
// Directional-derivative (Taylor remainder) check of a gradient.
//
// For F: R^p -> R, a claimed gradient g, a direction v and step sizes h:
//   E0(h) = |F(theta + h v) - F(theta)|                 -> slope 1 in h
//   E1(h) = |F(theta + h v) - F(theta) - h g.v|         -> slope 2 iff g is
//                                                          the true gradient
// Slopes are least-squares fits of log E against log h over the points
// above the rounding floor (1e-12 relative to |F|); E1 collapsing to the
// floor everywhere is itself a pass, reported as slope1 = inf.
// ---------------------------------------------------------------------------

struct TaylorCheck {
  std::vector<double> hs, e0, e1;
  double slope0 = 0.0;
  double slope1 = 0.0;
  double f0 = 0.0;     // F(theta)
  double dirderiv = 0.0;  // g.v
};

std::vector<double> default_taylor_steps();  // 1e-1 ... ~3e-5, half decades

TaylorCheck taylor_check(const std::function<double(const Vec&)>& F,
                         const Vec& theta, const Vec& grad, const Vec& v,
                         const std::vector<double>& hs = default_taylor_steps());

// ---------------------------------------------------------------------------
// Invertibility of the learned flow: push samples forward, pull the result
// back through the reversed field with the same solver, and measure
// || y0_roundtrip - y0 || per sample.
// ---------------------------------------------------------------------------

struct InverseErrorReport {
  Vec per_sample;
  double mean = 0.0;
  double max = 0.0;
  long forward_nfe = 0, backward_nfe = 0;
};

InverseErrorReport inverse_error(const ControlGrid& grid, const Mat& Y0,
                                 const SolverConfig& forward_cfg,
                                 const SolverConfig& backward_cfg);

// ---------------------------------------------------------------------------
// Re-discretization study: evaluate a trained model under solver
// configurations it was not trained with.
// ---------------------------------------------------------------------------

struct RediscRow {
  SolverConfig solver;
  double loss = 0.0;          // objective data term under this solver
  double inverse_err = 0.0;   // mean round-trip error under this solver
  long nfe = 0;               // forward NFE of the evaluation solve
  bool is_training_config = false;
};

std::vector<RediscRow> rediscretize_eval(
    const ControlGrid& grid, const Objective& obj, const Mat& test_batch,
    const Mat& inverse_batch, const std::vector<SolverConfig>& solvers,
    const SolverConfig& training_cfg, TraceMode trace = TraceMode::Exact);

// ---------------------------------------------------------------------------
// Quality of the stochastic divergence estimator at one point: sample mean
// and standard error over n probe draws against the exact value.
// ---------------------------------------------------------------------------

struct TraceStats {
  double exact = 0.0;
  double mean = 0.0;
  double stderr_mean = 0.0;
  long draws = 0;
};

TraceStats trace_estimator_stats(const DynamicsLayer& layer, const Vec& theta,
                                 const Vec& y, double t, long draws,
                                 std::uint64_t seed);

}  // namespace odeflow
