#include "odeflow/train.hpp"

#include <chrono>
#include <cmath>

#include "odeflow/rng.hpp"

namespace odeflow {

void adam_step(AdamState& st, const AdamConfig& cfg, Vec& params,
               const Vec& grad) {
  require(params.size() == grad.size(), "parameter/gradient size mismatch");
  if (st.m.size() != params.size()) {
    st.m = Vec::Zero(params.size());
    st.v = Vec::Zero(params.size());
    st.step = 0;
  }
  st.step += 1;
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v.array().matrix() +
         (1.0 - cfg.beta2) * grad.array().square().matrix();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  params.array() -= cfg.lr * (st.m.array() / bc1) /
                    ((st.v.array() / bc2).sqrt() + cfg.eps);
}

void sgd_step(double lr, Vec& params, const Vec& grad) {
  require(params.size() == grad.size(), "parameter/gradient size mismatch");
  params -= lr * grad;
}

std::string to_string(Engine e) {
  return e == Engine::DiscOpt ? "disc-opt" : "opt-disc";
}

Engine engine_from_string(const std::string& s) {
  if (s == "disc-opt") return Engine::DiscOpt;
  if (s == "opt-disc") return Engine::OptDisc;
  throw ConfigError("unknown engine '" + s + "' (expected disc-opt|opt-disc)");
}

TrainResult train(const ControlGrid& init, const Objective& obj,
                  const BatchSampler& batch, const TrainConfig& cfg) {
  require(!cfg.phases.empty(), "training needs at least one phase");
  const bool cnf = obj.kind == ObjectiveKind::CnfNll;

  TrainResult res;
  res.grid = init;
  Vec params = flatten(res.grid);

  long iteration = 0;
  long cum_nfe = 0;
  const auto t_start = std::chrono::steady_clock::now();

  for (size_t p = 0; p < cfg.phases.size(); ++p) {
    const TrainPhase& ph = cfg.phases[p];
    AdamState adam;  // restart optimizer state at phase boundaries
    AdamConfig ac = cfg.adam;
    ac.lr = ph.lr;

    for (long k = 0; k < ph.iterations; ++k, ++iteration) {
      const Mat Y0 = batch(iteration);
      require(Y0.rows() == res.grid.layer.dim() && Y0.cols() > 0,
              "batch sampler returned a bad batch");

      GradientReport rep;
      if (cfg.engine == Engine::DiscOpt) {
        SolveRecord rec;
        if (cnf) {
          Mat eps;
          const Mat* eps_p = nullptr;
          if (cfg.trace == TraceMode::Hutchinson) {
            Rng prng(derive_seed(cfg.seed, 0x70000000ull + iteration));
            eps = prng.rademacher_mat(res.grid.layer.dim(), Y0.cols());
            eps_p = &eps;
          }
          rec = cnf_solve(res.grid, Y0, res.grid.T, ph.solver, cfg.trace,
                          eps_p);
        } else {
          rec = ode_solve(res.grid, Y0, res.grid.T, ph.solver);
        }
        rep = discopt_grad(res.grid, rec, obj);
      } else {
        OptDiscOptions opt;
        opt.forward = ph.solver;
        opt.backward = cfg.backward;
        opt.use_stored_trajectory = cfg.use_stored_trajectory;
        opt.trace = cfg.trace;
        if (cnf && cfg.trace == TraceMode::Hutchinson) {
          Rng prng(derive_seed(cfg.seed, 0x70000000ull + iteration));
          opt.eps = prng.rademacher_mat(res.grid.layer.dim(), Y0.cols());
        }
        rep = optdisc_grad(res.grid, Y0, res.grid.T, obj, opt);
      }

      if (!rep.grad.allFinite() || !std::isfinite(rep.loss))
        throw NumericalError("training diverged at iteration " +
                             std::to_string(iteration));

      if (cfg.use_sgd)
        sgd_step(ac.lr, params, rep.grad);
      else
        adam_step(adam, ac, params, rep.grad);
      unflatten(res.grid, params);

      cum_nfe += rep.forward_nfe;
      const double wall =
          std::chrono::duration<double, std::milli>(
              std::chrono::steady_clock::now() - t_start)
              .count();
      res.log.rows.push_back({iteration, rep.loss, cum_nfe, wall,
                              static_cast<int>(p)});
    }
  }

  res.total_nfe = cum_nfe;
  res.total_wall_ms = res.log.rows.empty() ? 0.0 : res.log.rows.back().wall_ms;
  return res;
}

}  // namespace odeflow
