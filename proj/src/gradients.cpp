#include "odeflow/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace odeflow {
namespace {

// Scatter a stage parameter-cotangent onto the control points supporting
// time t (transpose of the interpolation used by eval_theta).
void scatter(const ControlGrid& grid, double t, const Vec& theta_bar,
             double scale, Vec& grad) {
  const InterpWeights w = interp_weights(grid, t);
  const Index np = grid.layer.param_count();
  if (w.w0 != 0.0) grad.segment(w.i0 * np, np) += (scale * w.w0) * theta_bar;
  if (w.i1 != w.i0 && w.w1 != 0.0)
    grad.segment(w.i1 * np, np) += (scale * w.w1) * theta_bar;
}

// Pull a cotangent back through one velocity evaluation, splitting off the
// log-density row when present: <C, [l; -div l]> differentiates to a state
// VJP plus a (negated) divergence-gradient contraction.
Mat aug_stage_vjp(const ControlGrid& grid, const Vec& theta, const Mat& X,
                  double t, const Mat& C, bool has_g, TraceMode mode,
                  const Mat* eps, Vec& theta_bar) {
  if (!has_g)
    return stage_vjp(grid.layer, theta, X, t, C, nullptr, TraceMode::None,
                     nullptr, theta_bar);
  const Index n = X.rows() - 1;
  const Vec mu = -C.row(n).transpose();
  Mat xbar = Mat::Zero(X.rows(), X.cols());
  xbar.topRows(n) = stage_vjp(grid.layer, theta, X.topRows(n), t,
                              C.topRows(n), &mu, mode, eps, theta_bar);
  return xbar;
}

// Direct loss cotangents on the recorded nodes (regression only; the
// log-density objective touches only the terminal state).
std::vector<int> node_targets(const SolveRecord& rec, const Objective& obj) {
  if (obj.kind == ObjectiveKind::Regression)
    return regression_step_targets(rec, obj);
  return std::vector<int>(rec.times.size(), -1);
}

Mat terminal_cotangent(const SolveRecord& rec, const Objective& obj,
                       const std::vector<int>& at) {
  if (obj.kind == ObjectiveKind::CnfNll) return cnf_terminal_cotangent(rec);
  Mat W = Mat::Zero(rec.states.back().rows(), rec.states.back().cols());
  if (at.back() >= 0)
    W = regression_cotangent(rec.states.back(), obj, at.back());
  return W;
}

}  // namespace

GradientReport discopt_grad(const ControlGrid& grid, const SolveRecord& rec,
                            const Objective& obj) {
  require(rec.h > 0.0 && !rec.stages.empty(),
          "exact reverse sweep needs a stored fixed-step record");
  require(obj.kind == ObjectiveKind::CnfNll ? rec.has_g : !rec.has_g,
          "objective kind does not match the record");

  const double h = rec.h;
  const long N = rec.steps();
  const Index np = grid.layer.param_count();
  const TraceMode mode = rec.trace;
  const Mat* eps = rec.eps.size() ? &rec.eps : nullptr;

  GradientReport rep;
  rep.grad = Vec::Zero(flat_size(grid));
  rep.forward_nfe = rec.nfe;
  rep.loss = data_loss(rec, obj) + tikhonov(grid, obj.alpha);

  const auto at = node_targets(rec, obj);
  Mat W = terminal_cotangent(rec, obj, at);

  Vec theta_bar(np);
  for (long j = N - 1; j >= 0; --j) {
    const double tj = rec.times[j];
    const Mat& Yj = rec.states[j];
    const auto& ks = rec.stages[j];

    if (rec.method == Method::Euler) {
      const Vec theta = eval_theta(grid, tj);
      const Mat c1 = h * W;
      theta_bar.setZero();
      W += aug_stage_vjp(grid, theta, Yj, tj, c1, rec.has_g, mode, eps,
                         theta_bar);
      scatter(grid, tj, theta_bar, 1.0, rep.grad);
      rep.backward_nfe += 1;
    } else {  // rk4: unwind the four stages in reverse
      const double tm = tj + 0.5 * h, te = tj + h;
      const Vec th0 = eval_theta(grid, tj);
      const Vec thm = eval_theta(grid, tm);
      const Vec the = eval_theta(grid, te);
      const Mat x2 = Yj + (0.5 * h) * ks[0];
      const Mat x3 = Yj + (0.5 * h) * ks[1];
      const Mat x4 = Yj + h * ks[2];

      const Mat c4 = (h / 6.0) * W;
      theta_bar.setZero();
      const Mat v4 =
          aug_stage_vjp(grid, the, x4, te, c4, rec.has_g, mode, eps, theta_bar);
      scatter(grid, te, theta_bar, 1.0, rep.grad);

      const Mat c3 = (2.0 * h / 6.0) * W + h * v4;
      theta_bar.setZero();
      const Mat v3 =
          aug_stage_vjp(grid, thm, x3, tm, c3, rec.has_g, mode, eps, theta_bar);
      scatter(grid, tm, theta_bar, 1.0, rep.grad);

      const Mat c2 = (2.0 * h / 6.0) * W + (0.5 * h) * v3;
      theta_bar.setZero();
      const Mat v2 =
          aug_stage_vjp(grid, thm, x2, tm, c2, rec.has_g, mode, eps, theta_bar);
      scatter(grid, tm, theta_bar, 1.0, rep.grad);

      const Mat c1 = (h / 6.0) * W + (0.5 * h) * v2;
      theta_bar.setZero();
      const Mat v1 =
          aug_stage_vjp(grid, th0, Yj, tj, c1, rec.has_g, mode, eps, theta_bar);
      scatter(grid, tj, theta_bar, 1.0, rep.grad);

      W += v1 + v2 + v3 + v4;
      rep.backward_nfe += 4;
    }

    if (at[j] >= 0) W += regression_cotangent(rec.states[j], obj, at[j]);
  }

  if (obj.alpha != 0.0) rep.grad += tikhonov_grad(grid, obj.alpha);
  return rep;
}

GradientReport backward_euler_adjoint_grad(const ControlGrid& grid,
                                           const SolveRecord& rec,
                                           const Objective& obj) {
  require(rec.method == Method::Euler && rec.h > 0.0,
          "backward-Euler adjoint needs a stored euler record");
  require(obj.kind == ObjectiveKind::CnfNll ? rec.has_g : !rec.has_g,
          "objective kind does not match the record");

  const double h = rec.h;
  const long N = rec.steps();
  const Index np = grid.layer.param_count();
  const TraceMode mode = rec.trace;
  const Mat* eps = rec.eps.size() ? &rec.eps : nullptr;

  GradientReport rep;
  rep.grad = Vec::Zero(flat_size(grid));
  rep.forward_nfe = rec.nfe;
  rep.loss = data_loss(rec, obj) + tikhonov(grid, obj.alpha);

  // Terminal-type objectives (the log-likelihood) seed the adjoint with the
  // terminal cotangent; integral-type data fits enter as source terms at the
  // shifted nodes below, so their sweep starts from zero.
  const auto at = node_targets(rec, obj);
  Mat z = obj.kind == ObjectiveKind::CnfNll
              ? terminal_cotangent(rec, obj, at)
              : Mat::Zero(rec.states.back().rows(), rec.states.back().cols());

  Vec theta_bar(np);
  for (long j = N - 1; j >= 0; --j) {
    // everything in this update is evaluated at node j+1
    const double tn = rec.times[j + 1];
    const Mat& Yn = rec.states[j + 1];
    const Vec theta = eval_theta(grid, tn);

    theta_bar.setZero();
    const Mat zdot =
        aug_stage_vjp(grid, theta, Yn, tn, z, rec.has_g, mode, eps, theta_bar);
    scatter(grid, tn, theta_bar, h, rep.grad);
    z += h * zdot;
    if (at[j + 1] >= 0)
      z += regression_cotangent(Yn, obj, at[j + 1]);
    rep.backward_nfe += 1;
  }

  if (obj.alpha != 0.0) rep.grad += tikhonov_grad(grid, obj.alpha);
  return rep;
}

GradientReport optdisc_grad(const ControlGrid& grid, const Mat& Y0, double T,
                            const Objective& obj, const OptDiscOptions& opt) {
  const Index n = grid.layer.dim();
  const Index B = Y0.cols();
  const Index np = grid.layer.param_count();
  const bool cnf = obj.kind == ObjectiveKind::CnfNll;
  const Mat* eps = opt.eps.size() ? &opt.eps : nullptr;

  // forward pass
  SolveRecord rec =
      cnf ? cnf_solve(grid, Y0, T, opt.forward, opt.trace, eps)
          : ode_solve(grid, Y0, T, opt.forward, /*store_stages=*/true);

  GradientReport rep;
  rep.grad = Vec::Zero(flat_size(grid));
  rep.forward_nfe = rec.nfe;
  rep.loss = data_loss(rec, obj) + tikhonov(grid, obj.alpha);

  // backward clock tau = T - t; loss jumps split it into segments
  std::vector<double> taus = {0.0};
  if (!cnf) {
    for (double tk : target_times(obj)) {
      const double tau = T - tk;
      if (tau > 1e-12 * std::max(1.0, T)) taus.push_back(tau);
    }
  }
  taus.push_back(T);
  std::sort(taus.begin(), taus.end());

  // backward state: [y; z] jointly re-integrated, or z alone with y looked
  // up from the forward record's interpolant
  const bool stored = opt.use_stored_trajectory;
  Mat y = rec.terminal_y();
  Mat z = Mat::Zero(n, B);
  if (cnf) z = cnf_terminal_cotangent(rec).topRows(n);
  const double lambda = 1.0 / static_cast<double>(B);  // log-density adjoint

  // forward state lookup for the stored-trajectory mode (strips the
  // log-density row, which the adjoint does not need)
  auto y_at = [&](double t) -> Mat {
    const Mat s = rec.state_at(t);
    return cnf ? Mat(s.topRows(n)) : s;
  };

  Vec theta_bar(np);
  auto zdot = [&](double t, const Mat& yt, const Mat& zt, Vec* tb) -> Mat {
    const Vec theta = eval_theta(grid, t);
    if (!cnf && tb == nullptr)
      return vjp_state(grid.layer, theta, yt, t, zt);
    Vec dummy = tb ? Vec() : Vec::Zero(np);
    Vec& acc = tb ? *tb : dummy;
    if (tb) acc.setZero();
    if (!cnf)
      return stage_vjp(grid.layer, theta, yt, t, zt, nullptr, TraceMode::None,
                       nullptr, acc);
    const Vec mu = Vec::Constant(B, -lambda);
    return stage_vjp(grid.layer, theta, yt, t, zt, &mu, opt.trace, eps, acc);
  };

  for (size_t s = 0; s + 1 < taus.size(); ++s) {
    const double tau_a = taus[s], tau_b = taus[s + 1];

    // loss jump entering this segment (tau_a corresponds to t = T - tau_a)
    if (!cnf) {
      const double tk = T - tau_a;
      const auto tts = target_times(obj);
      for (size_t k = 0; k < tts.size(); ++k) {
        if (std::abs(tts[k] - tk) <= 1e-9 * std::max(1.0, T)) {
          const Mat yk = stored ? y_at(tk) : y;
          z += regression_cotangent(yk, obj, static_cast<int>(k) + 1);
        }
      }
    }
    if (tau_b - tau_a <= 1e-12 * std::max(1.0, T)) continue;

    SolveRecord seg;
    if (stored) {
      const Field f = [&](double tl, const Mat& zt) {
        const double t = T - (tau_a + tl);
        return zdot(t, y_at(t), zt, nullptr);
      };
      seg = integrate_field(f, z, tau_b - tau_a, opt.backward, true);
      z = seg.terminal();
    } else {
      const Field f = [&](double tl, const Mat& x) {
        const double t = T - (tau_a + tl);
        const Mat yt = x.topRows(n);
        const Mat zt = x.bottomRows(n);
        Mat dx(2 * n, B);
        dx.topRows(n) =
            -forward(grid.layer, eval_theta(grid, t), yt, t);
        dx.bottomRows(n) = zdot(t, yt, zt, nullptr);
        return dx;
      };
      Mat x(2 * n, B);
      x.topRows(n) = y;
      x.bottomRows(n) = z;
      seg = integrate_field(f, x, tau_b - tau_a, opt.backward, true);
      y = seg.terminal().topRows(n);
      z = seg.terminal().bottomRows(n);
    }
    rep.backward_nfe += seg.nfe;

    // composite trapezoid rule on the accepted steps: the integrand
    // (d l / d theta)^T z at every node, endpoint nodes at half weight
    for (long i = 0; i <= seg.steps(); ++i) {
      const double left = i > 0 ? seg.times[i] - seg.times[i - 1] : 0.0;
      const double right =
          i < seg.steps() ? seg.times[i + 1] - seg.times[i] : 0.0;
      const double t = T - (tau_a + seg.times[i]);
      Mat yi, zi;
      if (stored) {
        yi = y_at(t);
        zi = seg.states[i];
      } else {
        yi = seg.states[i].topRows(n);
        zi = seg.states[i].bottomRows(n);
      }
      zdot(t, yi, zi, &theta_bar);
      rep.backward_nfe += 1;
      scatter(grid, t, theta_bar, 0.5 * (left + right), rep.grad);
    }
    if (!seg.terminal().allFinite())
      throw NumericalError("adjoint solve diverged");
  }

  if (obj.alpha != 0.0) rep.grad += tikhonov_grad(grid, obj.alpha);
  return rep;
}

GradientReport cnf_grad(const ControlGrid& grid, const SolveRecord& rec,
                        double alpha) {
  return discopt_grad(grid, rec, Objective::cnf(alpha));
}

}  // namespace odeflow
