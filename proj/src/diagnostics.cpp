#include "odeflow/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "odeflow/rng.hpp"

namespace odeflow {

namespace {

// Least-squares slope of log(e) against log(h) over the given points.
double loglog_slope(const std::vector<double>& hs, const std::vector<double>& es) {
  const std::size_t n = hs.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = std::log(hs[i]);
    const double y = std::log(es[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  return (n * sxy - sx * sy) / denom;
}

// Fit a slope over the points that sit above the rounding floor. Fewer than
// two usable points means the error collapsed to rounding noise at every
// step size, which we report as an infinite slope (better than any power).
double filtered_slope(const std::vector<double>& hs, const std::vector<double>& es,
                      double floor) {
  std::vector<double> hu, eu;
  for (std::size_t i = 0; i < hs.size(); ++i) {
    if (es[i] > floor) {
      hu.push_back(hs[i]);
      eu.push_back(es[i]);
    }
  }
  if (hu.size() < 2) return std::numeric_limits<double>::infinity();
  return loglog_slope(hu, eu);
}

}  // namespace

std::vector<double> default_taylor_steps() {
  std::vector<double> hs;
  for (int j = 0; j < 8; ++j) hs.push_back(std::pow(10.0, -1.0 - 0.5 * j));
  return hs;
}

TaylorCheck taylor_check(const std::function<double(const Vec&)>& F,
                         const Vec& theta, const Vec& grad, const Vec& v,
                         const std::vector<double>& hs) {
  require(theta.size() == grad.size() && theta.size() == v.size(),
          "taylor_check: theta, grad and v must have equal sizes");
  require(!hs.empty(), "taylor_check: empty step list");
  for (double h : hs)
    require(h > 0.0, "taylor_check: step sizes must be positive");

  TaylorCheck out;
  out.hs = hs;
  out.f0 = F(theta);
  out.dirderiv = grad.dot(v);
  for (double h : hs) {
    const double fh = F(theta + h * v);
    out.e0.push_back(std::abs(fh - out.f0));
    out.e1.push_back(std::abs(fh - out.f0 - h * out.dirderiv));
  }
  const double floor = 1e-12 * std::max(1.0, std::abs(out.f0));
  out.slope0 = filtered_slope(hs, out.e0, floor);
  out.slope1 = filtered_slope(hs, out.e1, floor);
  return out;
}

InverseErrorReport inverse_error(const ControlGrid& grid, const Mat& Y0,
                                 const SolverConfig& forward_cfg,
                                 const SolverConfig& backward_cfg) {
  const SolveRecord fwd = ode_solve(grid, Y0, grid.T, forward_cfg, false);
  const SolveRecord bwd = inverse_solve(grid, fwd.terminal_y(), grid.T, backward_cfg);
  const Mat back = bwd.terminal_y();

  InverseErrorReport rep;
  rep.per_sample = (back - Y0).colwise().norm();
  rep.mean = rep.per_sample.mean();
  rep.max = rep.per_sample.maxCoeff();
  rep.forward_nfe = fwd.nfe;
  rep.backward_nfe = bwd.nfe;
  return rep;
}

std::vector<RediscRow> rediscretize_eval(
    const ControlGrid& grid, const Objective& obj, const Mat& test_batch,
    const Mat& inverse_batch, const std::vector<SolverConfig>& solvers,
    const SolverConfig& training_cfg, TraceMode trace) {
  std::vector<RediscRow> rows;
  rows.reserve(solvers.size());
  for (const SolverConfig& cfg : solvers) {
    RediscRow row;
    row.solver = cfg;
    if (obj.kind == ObjectiveKind::CnfNll) {
      const SolveRecord rec = cnf_solve(grid, test_batch, grid.T, cfg, trace,
                                        nullptr, false);
      row.loss = cnf_nll(rec);
      row.nfe = rec.nfe;
    } else {
      const SolveRecord rec = ode_solve(grid, test_batch, grid.T, cfg);
      row.loss = regression_loss(rec, obj);
      row.nfe = rec.nfe;
    }
    row.inverse_err = inverse_error(grid, inverse_batch, cfg, cfg).mean;
    row.is_training_config =
        cfg.method == training_cfg.method &&
        (cfg.method == Method::Dopri5
             ? (cfg.rtol == training_cfg.rtol && cfg.atol == training_cfg.atol)
             : std::abs(cfg.h - training_cfg.h) <=
                   1e-12 * std::max(1.0, std::abs(training_cfg.h)));
    rows.push_back(row);
  }
  return rows;
}

TraceStats trace_estimator_stats(const DynamicsLayer& layer, const Vec& theta,
                                 const Vec& y, double t, long draws,
                                 std::uint64_t seed) {
  require(draws > 0, "trace_estimator_stats: draws must be positive");

  TraceStats stats;
  stats.exact = exact_trace(layer, theta, y, t);
  stats.draws = draws;

  // Batch the probe draws so each chunk is one wide fused evaluation.
  Rng rng(seed);
  const long chunk = 8192;
  double sum = 0.0, sumsq = 0.0;
  for (long done = 0; done < draws;) {
    const long b = std::min(chunk, draws - done);
    const Mat Y = y.replicate(1, b);
    const Mat eps = rng.rademacher_mat(y.size(), b);
    const Vec est = hutchinson_trace(layer, theta, Y, t, eps);
    sum += est.sum();
    sumsq += est.squaredNorm();
    done += b;
  }
  stats.mean = sum / static_cast<double>(draws);
  const double var =
      draws > 1 ? (sumsq - draws * stats.mean * stats.mean) / (draws - 1) : 0.0;
  stats.stderr_mean = std::sqrt(std::max(0.0, var) / static_cast<double>(draws));
  return stats;
}

}  // namespace odeflow
