#include "odeflow/objectives.hpp"

#include <cmath>

namespace odeflow {

Objective Objective::regression(const Mat& targets, double dt, double alpha) {
  require(targets.cols() >= 2, "regression needs at least one target");
  require(dt > 0.0, "regression needs a positive data spacing");
  Objective o;
  o.kind = ObjectiveKind::Regression;
  o.targets = targets;
  o.dt = dt;
  o.alpha = alpha;
  return o;
}

Objective Objective::cnf(double alpha) {
  Objective o;
  o.kind = ObjectiveKind::CnfNll;
  o.alpha = alpha;
  return o;
}

std::vector<double> target_times(const Objective& obj) {
  std::vector<double> ts;
  for (Index k = 1; k < obj.targets.cols(); ++k)
    ts.push_back(obj.dt * static_cast<double>(k));
  return ts;
}

std::vector<int> regression_step_targets(const SolveRecord& rec,
                                         const Objective& obj) {
  require(rec.h > 0.0, "step targets need a fixed-step record");
  std::vector<int> at(rec.times.size(), -1);
  for (Index k = 1; k < obj.targets.cols(); ++k) {
    const double tk = obj.dt * static_cast<double>(k);
    const double jr = tk / rec.h;
    const long j = std::llround(jr);
    require(j >= 0 && j < static_cast<long>(at.size()) &&
                std::abs(jr - static_cast<double>(j)) <= 1e-9 * std::max(1.0, jr),
            "target time does not sit on a step node");
    at[j] = static_cast<int>(k);
  }
  return at;
}

Mat regression_cotangent(const Mat& Y, const Objective& obj, int target) {
  const double w = obj.dt / static_cast<double>(Y.cols());
  return w * (Y.colwise() - obj.targets.col(target)).eval();
}

double regression_loss(const SolveRecord& rec, const Objective& obj) {
  require(obj.kind == ObjectiveKind::Regression, "not a regression objective");
  double J = 0.0;
  if (rec.h > 0.0) {
    const auto at = regression_step_targets(rec, obj);
    for (size_t j = 0; j < at.size(); ++j) {
      if (at[j] < 0) continue;
      J += 0.5 * obj.dt *
           (rec.states[j].colwise() - obj.targets.col(at[j])).squaredNorm();
    }
  } else {
    for (Index k = 1; k < obj.targets.cols(); ++k) {
      const Mat y = rec.state_at(obj.dt * static_cast<double>(k));
      J += 0.5 * obj.dt * (y.colwise() - obj.targets.col(k)).squaredNorm();
    }
  }
  return J / static_cast<double>(rec.batch());
}

double cnf_nll(const SolveRecord& rec) {
  require(rec.has_g, "record has no log-density channel");
  const Mat yT = rec.terminal_y();
  const Vec g = rec.terminal_g();
  const double n_f = static_cast<double>(yT.rows());
  const double B = static_cast<double>(yT.cols());
  return 0.5 * n_f * std::log(2.0 * M_PI) +
         (0.5 * yT.colwise().squaredNorm().sum() + g.sum()) / B;
}

double data_loss(const SolveRecord& rec, const Objective& obj) {
  return obj.kind == ObjectiveKind::Regression ? regression_loss(rec, obj)
                                               : cnf_nll(rec);
}

double tikhonov(const ControlGrid& grid, double alpha) {
  if (alpha == 0.0) return 0.0;
  if (grid.n_controls() == 1)
    return 0.5 * alpha * grid.T * grid.params[0].squaredNorm();
  double r = 0.0;
  for (Index c = 0; c + 1 < grid.n_controls(); ++c) {
    const double len = grid.times[c + 1] - grid.times[c];
    const Vec& a = grid.params[c];
    const Vec& b = grid.params[c + 1];
    // int_0^1 ||(1-s) a + s b||^2 ds = (||a||^2 + a.b + ||b||^2) / 3
    r += len / 3.0 * (a.squaredNorm() + a.dot(b) + b.squaredNorm());
  }
  return 0.5 * alpha * r;
}

Vec tikhonov_grad(const ControlGrid& grid, double alpha) {
  Vec g = Vec::Zero(flat_size(grid));
  if (alpha == 0.0) return g;
  const Index np = grid.layer.param_count();
  if (grid.n_controls() == 1) {
    g = alpha * grid.T * grid.params[0];
    return g;
  }
  for (Index c = 0; c + 1 < grid.n_controls(); ++c) {
    const double len = grid.times[c + 1] - grid.times[c];
    const Vec& a = grid.params[c];
    const Vec& b = grid.params[c + 1];
    g.segment(c * np, np) += alpha * len / 6.0 * (2.0 * a + b);
    g.segment((c + 1) * np, np) += alpha * len / 6.0 * (a + 2.0 * b);
  }
  return g;
}

Mat cnf_terminal_cotangent(const SolveRecord& rec) {
  require(rec.has_g, "record has no log-density channel");
  const Mat& s = rec.terminal();
  Mat w(s.rows(), s.cols());
  const double invB = 1.0 / static_cast<double>(s.cols());
  w.topRows(s.rows() - 1) = invB * s.topRows(s.rows() - 1);
  w.row(s.rows() - 1).setConstant(invB);
  return w;
}

}  // namespace odeflow
