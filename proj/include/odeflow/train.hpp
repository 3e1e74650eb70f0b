#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "odeflow/gradients.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

// ---------------------------------------------------------------------------
// First-order parameter updates.  Free functions over flat vectors so any
// caller can drive them; state is carried explicitly.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m, v;
  long step = 0;
};

// One bias-corrected Adam update; state resizes lazily on first use.
void adam_step(AdamState& st, const AdamConfig& cfg, Vec& params,
               const Vec& grad);

void sgd_step(double lr, Vec& params, const Vec& grad);

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

enum class Engine { DiscOpt, OptDisc };

std::string to_string(Engine e);
Engine engine_from_string(const std::string& s);

struct IterationStat {
  long iteration = 0;   // global index, continues across phases
  double loss = 0.0;    // objective at the evaluated point
  long cum_nfe = 0;     // cumulative forward velocity evaluations
  double wall_ms = 0.0; // cumulative wall time
  int phase = 0;
};

struct ConvergenceLog {
  std::vector<IterationStat> rows;
};

// Supplies the batch of initial states for an iteration (a constant matrix
// for trajectory fitting, fresh density samples for flow training).
using BatchSampler = std::function<Mat(long iteration)>;

struct TrainPhase {
  long iterations = 0;
  SolverConfig solver;
  double lr = 1e-3;
};

struct TrainConfig {
  Engine engine = Engine::DiscOpt;
  std::vector<TrainPhase> phases;   // one entry = single-level training
  AdamConfig adam;                  // lr comes from the phase
  bool use_sgd = false;
  TraceMode trace = TraceMode::Exact;      // log-density objectives
  SolverConfig backward;                   // adjoint solver (OptDisc)
  bool use_stored_trajectory = false;      // OptDisc study flag
  std::uint64_t seed = 0;                  // probe stream for Hutchinson
};

struct TrainResult {
  ControlGrid grid;
  ConvergenceLog log;
  long total_nfe = 0;
  double total_wall_ms = 0.0;
};

// Minimize the objective over the control grid.  Each phase runs its own
// solver configuration and learning rate; optimizer state restarts at phase
// boundaries (the loss typically ticks up right after a switch before
// dropping below the coarse level's floor).
TrainResult train(const ControlGrid& init, const Objective& obj,
                  const BatchSampler& batch, const TrainConfig& cfg);

}  // namespace odeflow
