#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "odeflow/data.hpp"
#include "odeflow/train.hpp"
#include "odeflow/types.hpp"

namespace odeflow {

std::string to_string(TraceMode m);
TraceMode trace_from_string(const std::string& s);

// One experiment, fully described by a JSON document.  Unknown keys and
// malformed values are configuration errors that name the offending field.
//
// Three experiment kinds are built in:
//   timeseries   fit a velocity field to the cubic-ODE reference trajectory
//   cnf-mixture  density estimation on the ring-of-Gaussians toy
//   cnf-csv      density estimation on a standardized CSV dataset
// Every field has an experiment-appropriate default, so the minimal valid
// config is {"experiment": "..."} (cnf-csv additionally needs data.csv_path).
struct ExperimentConfig {
  std::string experiment = "timeseries";
  Engine engine = Engine::DiscOpt;
  std::uint64_t seed = 42;

  double T = 1.5;
  Index control_points = 1;
  double alpha = 0.0;

  // network
  std::string kind = "cubic-mlp";  // linear | cubic-mlp | concatsquash
  Index dim = 2;
  Index hidden = 50;
  int hidden_layers = 1;  // concatsquash only
  int flow_steps = 1;     // concatsquash only
  Gate gate = Gate::Tanh;

  // solvers
  SolverConfig solver;    // training discretization
  SolverConfig backward;  // adjoint solver (opt-disc engine)
  bool use_stored_trajectory = false;
  TraceMode trace = TraceMode::Exact;

  // optimizer
  bool use_sgd = false;
  double lr = 1e-3;
  long iterations = 300;
  Index batch = 512;
  AdamConfig adam;

  // optional coarse-to-fine schedule; when present it overrides
  // (solver, lr, iterations) with one entry per phase
  std::vector<TrainPhase> multilevel;

  // data
  TimeSeriesConfig timeseries;
  MixtureConfig mixture;
  std::string csv_path;
  Index test_samples = 8192;
  Index inverse_samples = 512;

  nlohmann::json raw;  // the parsed document, echoed into artifacts
};

ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path);

// ---------------------------------------------------------------------------
// Assembly of runnable objects from a parsed config.
// ---------------------------------------------------------------------------

DynamicsLayer make_layer(const ExperimentConfig& cfg);

// Fresh grid with Glorot weights drawn from cfg.seed.
ControlGrid make_grid(const ExperimentConfig& cfg);

TrainConfig make_train_config(const ExperimentConfig& cfg);

// The data side of an experiment: objective, training batches and the
// held-out batches used for evaluation.  Batches are derived from cfg.seed,
// so two runs with equal seeds see identical data.
struct Problem {
  Objective objective;
  BatchSampler sampler;
  Mat test_batch;     // density-estimation test set (empty for regression)
  Mat inverse_batch;  // round-trip metric batch (empty for regression)
};

Problem make_problem(const ExperimentConfig& cfg);

// Everything needed to run: for cnf-csv the feature count comes from the
// file, so the echoed config inside carries the resolved dimension.
struct Experiment {
  ExperimentConfig cfg;
  ControlGrid grid;
  Problem problem;
  TrainConfig train;
};

Experiment make_experiment(const ExperimentConfig& cfg);

}  // namespace odeflow
