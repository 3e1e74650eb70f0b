#pragma once

#include <cstdint>
#include <vector>

#include "odeflow/dynamics.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

// Time-dependent parameterization of the velocity field: one flat parameter
// vector per control time, interpolated piecewise-linearly in between.  A
// single control point represents parameters that are constant in time.
//
// Control times are ascending, start at 0 and end at T (or are exactly {0}
// for the constant case).  The optimizer treats the whole grid as one flat
// vector via flatten/unflatten; layout is params[0], params[1], ... .
struct ControlGrid {
  DynamicsLayer layer;
  double T = 0.0;
  std::vector<double> times;
  std::vector<Vec> params;

  Index n_controls() const { return static_cast<Index>(times.size()); }
};

ControlGrid make_control_grid(const DynamicsLayer& layer, double T,
                              Index n_controls);

// Interpolation support of a query time: up to two control indices and
// their convex weights.
struct InterpWeights {
  int i0 = 0, i1 = 0;
  double w0 = 1.0, w1 = 0.0;
};

// Weights at time t.  Queries are clamped into [0, T]; overshoot beyond a
// small tolerance (1e-9 * max(1, T)) is a contract violation so solver
// round-off passes but genuinely out-of-range queries do not.
InterpWeights interp_weights(const ControlGrid& grid, double t);

// Interpolated parameter vector theta(t).
Vec eval_theta(const ControlGrid& grid, double t);

// Glorot (uniform fan-balanced) initialization: every affine map's weights
// are drawn uniformly from +-sqrt(6 / (fan_in + fan_out)), biases start at
// zero.  Draw order is fixed: control points in time order, affine blocks
// in parameter order, weights column-major.  Same seed, same grid.
void glorot_init(ControlGrid& grid, std::uint64_t seed);

// Re-sample the grid onto new control times by evaluating the current
// interpolant there.  When the new times contain the old ones, the
// represented function theta(t) is unchanged.
ControlGrid refine_controls(const ControlGrid& grid,
                            const std::vector<double>& new_times);

// Optimizer currency: all control parameters as one flat vector.
Index flat_size(const ControlGrid& grid);
Vec flatten(const ControlGrid& grid);
void unflatten(ControlGrid& grid, const Vec& flat);

}  // namespace odeflow
