#pragma once

#include <cmath>
#include <string>

#include "odeflow/rng.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

// Reference time series: the trajectory of
//   du/dt = A u^3  (elementwise cube),  u(0) = u0
// sampled on a uniform clock with n_points points from 0 to T inclusive.
// The reference solve runs at tolerances far below anything the trained
// models use, so the samples act as ground truth.
struct TimeSeriesConfig {
  Mat A = (Mat(2, 2) << -0.1, 2.0, -2.0, -0.1).finished();
  Vec u0 = (Vec(2) << 2.0, 0.0).finished();
  double T = 1.5;
  Index n_points = 30;
  double rtol = 1e-10;
  double atol = 1e-12;
};

struct TimeSeriesData {
  Vec times;   // n_points entries, times[0] = 0, times[n-1] = T
  Mat values;  // n_f x n_points, column k = u(t_k)
  double dt = 0.0;
};

TimeSeriesData generate_timeseries(const TimeSeriesConfig& cfg = {});

// Ring of Gaussians in the plane: `modes` equally spaced centers on a
// circle, isotropic with the given standard deviation, equal weights.
struct MixtureConfig {
  int modes = 8;
  double radius = 2.0 * std::sqrt(2.0);
  double sigma = 0.5 / std::sqrt(2.0);
};

// n samples, one per column.  Draw order: mode index, then the two normal
// coordinates, per sample.
Mat sample_mixture(const MixtureConfig& cfg, Index n, Rng& rng);

double mixture_log_density(const MixtureConfig& cfg, const Vec& x);

// Differential entropy estimate by Monte Carlo (nats); the best achievable
// negative log-likelihood of any density model on this data.
double mixture_entropy_mc(const MixtureConfig& cfg, Index n, Rng& rng);

// Numeric CSV of samples (rows = records, columns = features), returned
// standardized to zero mean and unit variance per feature, one sample per
// column.  A single leading non-numeric row is treated as a header.
struct CsvData {
  Mat samples;  // n_f x N, standardized
  Vec mean, stddev;
};

CsvData load_csv(const std::string& path);

}  // namespace odeflow
