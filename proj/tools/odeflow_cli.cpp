// Command-line front end: wires configs, training, checkpoints and the
// diagnostic reports together.  Exit codes: 0 success, 2 configuration
// error, 3 numerical failure.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "odeflow/config.hpp"
#include "odeflow/diagnostics.hpp"
#include "odeflow/io.hpp"

namespace {

using namespace odeflow;
using nlohmann::json;

struct CommonOpts {
  std::string config;
  std::string checkpoint;
  std::string out = ".";
  long long seed = -1;  // <0 = keep the config's seed
  int threads = 0;
};

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

// Effective config: file contents with command-line overrides applied, the
// exact document echoed into every artifact.
ExperimentConfig load_config(const CommonOpts& o) {
  if (o.config.empty()) throw ConfigError("missing --config");
  ExperimentConfig cfg = load_experiment_config(o.config);
  if (o.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(o.seed);
    cfg.raw["seed"] = cfg.seed;
  }
  return cfg;
}

// Config for checkpoint-driven commands: an explicit --config wins, else
// the echo embedded in the checkpoint.
ExperimentConfig config_for_checkpoint(const CommonOpts& o, const Checkpoint& cp) {
  if (!o.config.empty()) return load_config(o);
  if (cp.config.is_null())
    throw ConfigError("checkpoint carries no config; pass --config");
  ExperimentConfig cfg = parse_experiment_config(cp.config);
  if (o.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(o.seed);
    cfg.raw["seed"] = cfg.seed;
  }
  return cfg;
}

// Held-out metrics of a trained grid under the given solver.
json final_metrics(const ExperimentConfig& cfg, const Problem& problem,
                   const ControlGrid& grid, const SolverConfig& solver) {
  json m;
  if (problem.objective.kind == ObjectiveKind::CnfNll) {
    const SolveRecord rec = cnf_solve(grid, problem.test_batch, grid.T, solver,
                                      TraceMode::Exact, nullptr, false);
    m["test_nll"] = cnf_nll(rec);
    m["test_nfe"] = rec.nfe;
    const InverseErrorReport inv =
        inverse_error(grid, problem.inverse_batch, solver, solver);
    m["inverse_error"] = inv.mean;
    m["inverse_error_max"] = inv.max;
  } else {
    const Mat y0 = cfg.timeseries.u0;
    const SolveRecord rec = ode_solve(grid, y0, grid.T, solver);
    m["train_loss"] =
        regression_loss(rec, problem.objective) + tikhonov(grid, cfg.alpha);
  }
  return m;
}

// The discretization a checkpoint was trained under: the last multilevel
// phase when a schedule is present, the plain solver block otherwise.
SolverConfig trained_solver(const ExperimentConfig& cfg) {
  return cfg.multilevel.empty() ? cfg.solver : cfg.multilevel.back().solver;
}

int cmd_train(const CommonOpts& o) {
  const ExperimentConfig cfg = load_config(o);
  const Experiment e = make_experiment(cfg);

  const TrainResult res =
      train(e.grid, e.problem.objective, e.problem.sampler, e.train);

  const SolverConfig eval_solver = e.train.phases.back().solver;
  json summary;
  summary["experiment"] = cfg.experiment;
  summary["engine"] = to_string(cfg.engine);
  summary["seed"] = cfg.seed;
  summary["iterations"] = static_cast<long>(res.log.rows.size());
  summary["final_loss"] =
      res.log.rows.empty() ? 0.0 : res.log.rows.back().loss;
  summary["total_nfe"] = res.total_nfe;
  summary["metrics"] = final_metrics(e.cfg, e.problem, res.grid, eval_solver);
  summary["timing"] = {
      {"total_wall_ms", res.total_wall_ms},
      {"mean_iteration_ms",
       res.log.rows.empty()
           ? 0.0
           : res.total_wall_ms / static_cast<double>(res.log.rows.size())}};
  summary["config"] = cfg.raw;

  save_checkpoint(join(o.out, "checkpoint.json"), res.grid, cfg.raw);
  write_convergence_csv(join(o.out, "convergence.csv"), res.log, cfg.raw);
  write_text_atomic(join(o.out, "summary.json"), summary.dump(2) + "\n");

  std::cout << "final loss " << summary["final_loss"].get<double>() << ", "
            << res.total_nfe << " nfe, " << res.total_wall_ms << " ms\n"
            << "artifacts in " << o.out << "\n";
  return 0;
}

int cmd_gradcheck(const CommonOpts& o, long iteration) {
  const ExperimentConfig cfg = load_config(o);
  Experiment e = make_experiment(cfg);

  ControlGrid grid = e.grid;
  if (!o.checkpoint.empty()) {
    grid = load_checkpoint(o.checkpoint).grid;
  } else if (iteration > 0) {
    TrainConfig tc = e.train;
    tc.phases = {{iteration, cfg.solver, cfg.lr}};
    grid = train(grid, e.problem.objective, e.problem.sampler, tc).grid;
  }

  const Objective& obj = e.problem.objective;
  const Mat batch = e.problem.sampler(iteration);
  const bool cnf = obj.kind == ObjectiveKind::CnfNll;
  const double T = grid.T;

  // The function under test is the discrete objective at the training
  // discretization; each engine's gradient is checked against it.
  auto F = [&](const Vec& flat) {
    ControlGrid g = grid;
    unflatten(g, flat);
    if (cnf) {
      const SolveRecord rec =
          cnf_solve(g, batch, T, cfg.solver, TraceMode::Exact, nullptr, false);
      return cnf_nll(rec) + tikhonov(g, cfg.alpha);
    }
    const SolveRecord rec = ode_solve(g, batch, T, cfg.solver);
    return regression_loss(rec, obj) + tikhonov(g, cfg.alpha);
  };

  const Vec theta = flatten(grid);
  Rng dir_rng(derive_seed(cfg.seed, 0x7a11));
  Vec v = dir_rng.normal_vec(theta.size());
  v /= v.norm();

  const SolveRecord fwd =
      cnf ? cnf_solve(grid, batch, T, cfg.solver, TraceMode::Exact, nullptr)
          : ode_solve(grid, batch, T, cfg.solver);
  const GradientReport gd = discopt_grad(grid, fwd, obj);

  OptDiscOptions od;
  od.forward = cfg.solver;
  od.backward = cfg.backward;
  od.use_stored_trajectory = cfg.use_stored_trajectory;
  od.trace = TraceMode::Exact;
  const GradientReport go = optdisc_grad(grid, batch, T, obj, od);

  const TaylorCheck td = taylor_check(F, theta, gd.grad, v);
  const TaylorCheck to = taylor_check(F, theta, go.grad, v);

  json out;
  out["iteration"] = iteration;
  out["disc-opt"] = taylor_json(td);
  out["opt-disc"] = taylor_json(to);
  out["config"] = cfg.raw;
  write_taylor_csv(join(o.out, "gradcheck.csv"),
                   {{"disc-opt", td}, {"opt-disc", to}}, cfg.raw);
  write_text_atomic(join(o.out, "gradcheck.json"), out.dump(2) + "\n");

  std::cout << "disc-opt: E0 slope " << td.slope0 << ", E1 slope " << td.slope1
            << "\n"
            << "opt-disc: E0 slope " << to.slope0 << ", E1 slope " << to.slope1
            << "\n";
  return 0;
}

int cmd_invcheck(const CommonOpts& o, const std::string& method_override,
                 double h_override) {
  if (o.checkpoint.empty()) throw ConfigError("missing --checkpoint");
  const Checkpoint cp = load_checkpoint(o.checkpoint);
  const ExperimentConfig cfg = config_for_checkpoint(o, cp);
  if (cfg.experiment == "timeseries")
    throw ConfigError("invcheck needs a density-estimation experiment");

  SolverConfig solver = trained_solver(cfg);
  if (!method_override.empty()) solver.method = method_from_string(method_override);
  if (h_override > 0.0) solver.h = h_override;

  const Problem problem = make_problem(cfg);
  const InverseErrorReport rep =
      inverse_error(cp.grid, problem.inverse_batch, solver, solver);

  json out;
  out["solver"] = solver_json(solver);
  out["mean"] = rep.mean;
  out["max"] = rep.max;
  out["samples"] = static_cast<long>(rep.per_sample.size());
  out["forward_nfe"] = rep.forward_nfe;
  out["backward_nfe"] = rep.backward_nfe;
  out["config"] = cfg.raw;
  write_text_atomic(join(o.out, "invcheck.json"), out.dump(2) + "\n");

  std::cout << "inverse error mean " << rep.mean << ", max " << rep.max
            << " over " << rep.per_sample.size() << " samples\n";
  return 0;
}

int cmd_rediscretize(const CommonOpts& o, const std::vector<double>& hs) {
  if (o.checkpoint.empty()) throw ConfigError("missing --checkpoint");
  const Checkpoint cp = load_checkpoint(o.checkpoint);
  const ExperimentConfig cfg = config_for_checkpoint(o, cp);
  const Problem problem = make_problem(cfg);
  if (cfg.experiment == "timeseries")
    throw ConfigError("rediscretize needs a density-estimation experiment");

  std::vector<SolverConfig> matrix;
  if (hs.empty()) {
    const double T = cp.grid.T;
    for (double div : {1.0, 2.0, 4.0, 10.0, 20.0})
      matrix.push_back({Method::Rk4, T / div});
    matrix.push_back({Method::Dopri5, 0.0});
  } else {
    for (double h : hs) {
      fixed_step_count(cp.grid.T, h);  // validate divisibility up front
      matrix.push_back({Method::Rk4, h});
    }
  }

  const std::vector<RediscRow> rows =
      rediscretize_eval(cp.grid, problem.objective, problem.test_batch,
                        problem.inverse_batch, matrix, cfg.solver);

  json out;
  out["rows"] = redisc_json(rows);
  out["config"] = cfg.raw;
  write_redisc_csv(join(o.out, "rediscretize.csv"), rows, cfg.raw);
  write_text_atomic(join(o.out, "rediscretize.json"), out.dump(2) + "\n");

  for (const RediscRow& r : rows)
    std::cout << to_string(r.solver.method)
              << (r.solver.method == Method::Dopri5
                      ? ""
                      : " h=" + std::to_string(r.solver.h))
              << ": loss " << r.loss << ", inverse error " << r.inverse_err
              << ", nfe " << r.nfe << (r.is_training_config ? "  [training]" : "")
              << "\n";
  return 0;
}

int cmd_compare(const CommonOpts& o, const std::string& config_b) {
  ExperimentConfig cfg_a = load_config(o);
  ExperimentConfig cfg_b;
  if (!config_b.empty()) {
    cfg_b = load_experiment_config(config_b);
    if (o.seed >= 0) {
      cfg_b.seed = static_cast<std::uint64_t>(o.seed);
      cfg_b.raw["seed"] = cfg_b.seed;
    }
  } else {
    // default comparison: the same experiment under the other engine
    cfg_b = cfg_a;
    cfg_b.engine =
        cfg_a.engine == Engine::DiscOpt ? Engine::OptDisc : Engine::DiscOpt;
    if (cfg_b.engine == Engine::OptDisc && cfg_b.backward.method != Method::Dopri5)
      cfg_b.backward = {Method::Dopri5, 0.0};
    cfg_b.raw["engine"] = to_string(cfg_b.engine);
  }

  json rows = json::array();
  for (const ExperimentConfig& cfg : {cfg_a, cfg_b}) {
    const Experiment e = make_experiment(cfg);
    const TrainResult res =
        train(e.grid, e.problem.objective, e.problem.sampler, e.train);
    const long iters = static_cast<long>(res.log.rows.size());

    const double final_loss =
        res.log.rows.empty() ? 0.0 : res.log.rows.back().loss;
    json row;
    row["engine"] = to_string(cfg.engine);
    row["solver"] = solver_json(cfg.solver);
    row["final_loss"] = final_loss;
    row["total_nfe"] = res.total_nfe;
    row["metrics"] =
        final_metrics(e.cfg, e.problem, res.grid, e.train.phases.back().solver);
    row["timing"] = {{"total_wall_ms", res.total_wall_ms},
                     {"mean_iteration_ms",
                      iters ? res.total_wall_ms / iters : 0.0}};
    rows.push_back(std::move(row));

    write_convergence_csv(
        join(o.out, "convergence_" + to_string(cfg.engine) + ".csv"), res.log,
        cfg.raw);
    std::cout << to_string(cfg.engine) << ": final loss " << final_loss
              << ", nfe " << res.total_nfe << ", " << res.total_wall_ms
              << " ms\n";
  }

  json out;
  out["runs"] = std::move(rows);
  out["config"] = cfg_a.raw;
  write_text_atomic(join(o.out, "comparison.json"), out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural-ODE training and verification toolkit"};
  app.require_subcommand(1);

  CommonOpts o;
  long iteration = 0;
  std::string method_override, config_b;
  double h_override = 0.0;
  std::vector<double> hs;

  auto add_common = [&](CLI::App* cmd, bool needs_config, bool needs_ckpt) {
    auto* c = cmd->add_option("--config", o.config, "experiment config JSON");
    if (needs_config) c->required();
    auto* k = cmd->add_option("--checkpoint", o.checkpoint, "checkpoint JSON");
    if (needs_ckpt) k->required();
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--seed", o.seed, "override the config seed");
    cmd->add_option("--threads", o.threads, "linear-algebra thread count");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "run an experiment");
  add_common(train_cmd, true, false);

  CLI::App* grad_cmd =
      app.add_subcommand("gradcheck", "Taylor-remainder check of both engines");
  add_common(grad_cmd, true, false);
  grad_cmd->add_option("--iteration", iteration,
                       "check after this many training iterations");

  CLI::App* inv_cmd =
      app.add_subcommand("invcheck", "round-trip inverse error of a checkpoint");
  add_common(inv_cmd, false, true);
  inv_cmd->add_option("--method", method_override, "solver override");
  inv_cmd->add_option("--step-size", h_override, "step-size override");

  CLI::App* re_cmd = app.add_subcommand(
      "rediscretize", "evaluate a checkpoint across solver settings");
  add_common(re_cmd, false, true);
  re_cmd->add_option("--step-size", hs, "fixed-step sizes to evaluate");

  CLI::App* cmp_cmd =
      app.add_subcommand("compare", "train both engines from one seed");
  add_common(cmp_cmd, true, false);
  cmp_cmd->add_option("--config-b", config_b,
                      "second config (default: same config, other engine)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (o.threads > 0) Eigen::setNbThreads(o.threads);

  try {
    if (train_cmd->parsed()) return cmd_train(o);
    if (grad_cmd->parsed()) return cmd_gradcheck(o, iteration);
    if (inv_cmd->parsed()) return cmd_invcheck(o, method_override, h_override);
    if (re_cmd->parsed()) return cmd_rediscretize(o, hs);
    if (cmp_cmd->parsed()) return cmd_compare(o, config_b);
  } catch (const odeflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const odeflow::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
