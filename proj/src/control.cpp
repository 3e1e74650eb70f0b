#include "odeflow/control.hpp"

#include <algorithm>
#include <cmath>

#include "odeflow/rng.hpp"

namespace odeflow {

ControlGrid make_control_grid(const DynamicsLayer& layer, double T,
                              Index n_controls) {
  require(T > 0.0, "control grid needs positive horizon T");
  require(n_controls >= 1, "control grid needs at least one control point");
  ControlGrid g;
  g.layer = layer;
  g.T = T;
  if (n_controls == 1) {
    g.times = {0.0};
  } else {
    for (Index c = 0; c < n_controls; ++c)
      g.times.push_back(T * static_cast<double>(c) /
                        static_cast<double>(n_controls - 1));
    g.times.back() = T;  // exact endpoint regardless of rounding
  }
  g.params.assign(g.times.size(), Vec::Zero(layer.param_count()));
  return g;
}

InterpWeights interp_weights(const ControlGrid& grid, double t) {
  const double tol = 1e-9 * std::max(1.0, grid.T);
  require(t >= -tol && t <= grid.T + tol,
          "query time outside the control horizon");
  const double tc = std::clamp(t, 0.0, grid.T);

  InterpWeights w;
  if (grid.n_controls() == 1) return w;  // constant-in-time parameters

  // locate the segment [times[i], times[i+1]] containing tc
  const auto& ts = grid.times;
  auto it = std::upper_bound(ts.begin(), ts.end(), tc);
  int hi = static_cast<int>(it - ts.begin());
  hi = std::clamp(hi, 1, static_cast<int>(ts.size()) - 1);
  const int lo = hi - 1;
  const double len = ts[hi] - ts[lo];
  const double s = (len > 0.0) ? (tc - ts[lo]) / len : 0.0;
  w.i0 = lo;
  w.i1 = hi;
  w.w0 = 1.0 - s;
  w.w1 = s;
  return w;
}

Vec eval_theta(const ControlGrid& grid, double t) {
  const InterpWeights w = interp_weights(grid, t);
  if (w.w1 == 0.0) return grid.params[w.i0];
  return w.w0 * grid.params[w.i0] + w.w1 * grid.params[w.i1];
}

void glorot_init(ControlGrid& grid, std::uint64_t seed) {
  Rng rng(seed);
  const auto blocks = grid.layer.affine_blocks();
  for (auto& theta : grid.params) {
    theta.setZero();
    for (const auto& b : blocks) {
      const double bound = std::sqrt(6.0 / static_cast<double>(b.in + b.out));
      for (Index j = 0; j < b.in * b.out; ++j)
        theta[b.offset + j] = rng.uniform(-bound, bound);
    }
  }
}

ControlGrid refine_controls(const ControlGrid& grid,
                            const std::vector<double>& new_times) {
  require(!new_times.empty(), "refined grid needs control times");
  require(std::is_sorted(new_times.begin(), new_times.end()),
          "control times must be ascending");
  if (new_times.size() > 1) {
    require(new_times.front() == 0.0 && new_times.back() == grid.T,
            "control times must span [0, T]");
  } else {
    require(new_times.front() == 0.0, "single control time must be 0");
  }

  ControlGrid out;
  out.layer = grid.layer;
  out.T = grid.T;
  out.times = new_times;
  out.params.reserve(new_times.size());
  for (double t : new_times) out.params.push_back(eval_theta(grid, t));
  return out;
}

Index flat_size(const ControlGrid& grid) {
  return grid.n_controls() * grid.layer.param_count();
}

Vec flatten(const ControlGrid& grid) {
  Vec flat(flat_size(grid));
  Index off = 0;
  for (const Vec& p : grid.params) {
    flat.segment(off, p.size()) = p;
    off += p.size();
  }
  return flat;
}

void unflatten(ControlGrid& grid, const Vec& flat) {
  require(flat.size() == flat_size(grid),
          "flat vector length does not match grid");
  Index off = 0;
  for (Vec& p : grid.params) {
    p = flat.segment(off, p.size());
    off += p.size();
  }
}

}  // namespace odeflow
