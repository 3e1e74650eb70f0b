#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "odeflow/control.hpp"
#include "odeflow/dynamics.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

enum class Method { Euler, Rk4, Dopri5 };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct SolverConfig {
  Method method = Method::Rk4;
  double h = 0.0;           // fixed step size (euler / rk4)
  double rtol = 1e-7;       // adaptive relative tolerance (dopri5)
  double atol = 1e-9;       // adaptive absolute tolerance (dopri5)
  long max_steps = 100000;  // accepted-step guard for adaptive solves
};

// Number of fixed steps implied by (T, h).  T/h must be an integer up to a
// few ulp of rounding slack; anything else is a configuration error.
long fixed_step_count(double T, double h);

// Record of one initial-value solve.  Batched: one sample per column.
// When the log-density channel rides along (has_g), states carry one extra
// bottom row g with dg/dt = -div l, g(0) = 0.
//
// nfe counts velocity evaluations per trajectory (a batched evaluation is
// one nfe), including rejected adaptive stages and step-size probing, so
// fixed-step euler costs N and rk4 costs 4N.
struct SolveRecord {
  Method method = Method::Rk4;
  double T = 0.0;
  double h = 0.0;  // 0 for adaptive
  long nfe = 0;
  bool has_g = false;
  TraceMode trace = TraceMode::None;
  Mat eps;  // Hutchinson probes, fixed for the whole solve

  std::vector<double> times;             // accepted times, times[0] = 0
  std::vector<Mat> states;               // state at accepted times
  std::vector<std::vector<Mat>> stages;  // per step: stage derivatives k_i

  // quintic dense-output segments (adaptive solves)
  struct DenseSeg {
    double t0 = 0, h = 0;
    std::array<Mat, 5> r;
  };
  std::vector<DenseSeg> dense;

  long steps() const { return static_cast<long>(times.size()) - 1; }
  Index batch() const { return states.empty() ? 0 : states[0].cols(); }

  const Mat& terminal() const { return states.back(); }
  // state without the log-density row
  Mat terminal_y() const;
  Vec terminal_g() const;

  // State at an arbitrary time inside [0, T]: dense interpolation for
  // adaptive records, cubic Hermite between nodes for fixed-step records
  // (exact at the nodes).
  Mat state_at(double t) const;
};

// ---------------------------------------------------------------------------
// Generic integrator core over an arbitrary batched field f(t, Y).
// Gradient engines reuse it for adjoint systems.  nfe counts f calls.
// ---------------------------------------------------------------------------
using Field = std::function<Mat(double, const Mat&)>;

SolveRecord integrate_field(const Field& f, const Mat& Y0, double T,
                            const SolverConfig& cfg, bool store_stages = true);

// ---------------------------------------------------------------------------
// Velocity-field solves.  The grid supplies both the architecture and the
// time-dependent parameters.
// ---------------------------------------------------------------------------

// Plain state solve dy/dt = l(theta(t), y, t), y(0) = Y0.
SolveRecord ode_solve(const ControlGrid& grid, const Mat& Y0, double T,
                      const SolverConfig& cfg, bool store_stages = true);

SolveRecord euler_solve(const ControlGrid& grid, const Mat& Y0, double T,
                        double h);
SolveRecord rk4_solve(const ControlGrid& grid, const Mat& Y0, double T,
                      double h);
SolveRecord dopri5_solve(const ControlGrid& grid, const Mat& Y0, double T,
                         double rtol = 1e-7, double atol = 1e-9);

// State solve augmented with the log-density channel
//   dg/dt = -div_y l(theta(t), y, t),  g(0) = 0,
// the trace evaluated exactly or with fixed Hutchinson probes.
SolveRecord cnf_solve(const ControlGrid& grid, const Mat& Y0, double T,
                      const SolverConfig& cfg,
                      TraceMode trace = TraceMode::Exact,
                      const Mat* eps = nullptr, bool store_stages = true);

// Integrate the reversed field from the terminal state: the returned record
// lives on the reversed clock tau = T - t, so its terminal state is the
// reconstructed y(0).
SolveRecord inverse_solve(const ControlGrid& grid, const Mat& YT, double T,
                          const SolverConfig& cfg);

}  // namespace odeflow
