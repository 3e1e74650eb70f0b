#include "odeflow/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace odeflow {
namespace {

// Dormand-Prince 5(4) tableau.  The 7th stage evaluates at the step result
// (first-same-as-last), the b-row equals the a7 row, and the embedded
// 4th-order error weights are e1..e7.  d1..d7 feed the quintic dense output.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                 a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                 a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                 a75 = -2187.0 / 6784, a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                 e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
constexpr double d1 = -12715105075.0 / 11282082432.0,
                 d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0,
                 d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0,
                 d7 = 69997945.0 / 29380423.0;

void check_finite(const Mat& Y, double t) {
  if (!Y.allFinite())
    throw NumericalError("solve diverged: non-finite state near t=" +
                         std::to_string(t));
}

SolveRecord fixed_solve(const Field& f, const Mat& Y0, double T,
                        const SolverConfig& cfg, bool store) {
  const long N = fixed_step_count(T, cfg.h);
  const double h = cfg.h;

  SolveRecord rec;
  rec.method = cfg.method;
  rec.T = T;
  rec.h = h;
  rec.times.reserve(N + 1);
  rec.states.reserve(N + 1);
  if (store) rec.stages.reserve(N);
  rec.times.push_back(0.0);
  rec.states.push_back(Y0);

  Mat Y = Y0;
  for (long j = 0; j < N; ++j) {
    const double t = h * static_cast<double>(j);
    std::vector<Mat> ks;
    if (cfg.method == Method::Euler) {
      Mat k1 = f(t, Y);
      rec.nfe += 1;
      Y += h * k1;
      if (store) ks.push_back(std::move(k1));
    } else {  // classical rk4
      Mat k1 = f(t, Y);
      Mat k2 = f(t + 0.5 * h, Y + (0.5 * h) * k1);
      Mat k3 = f(t + 0.5 * h, Y + (0.5 * h) * k2);
      Mat k4 = f(t + h, Y + h * k3);
      rec.nfe += 4;
      Y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      if (store) {
        ks.reserve(4);
        ks.push_back(std::move(k1));
        ks.push_back(std::move(k2));
        ks.push_back(std::move(k3));
        ks.push_back(std::move(k4));
      }
    }
    check_finite(Y, h * static_cast<double>(j + 1));
    rec.times.push_back(h * static_cast<double>(j + 1));
    rec.states.push_back(Y);
    if (store) rec.stages.push_back(std::move(ks));
  }
  return rec;
}

// Hairer-style automatic initial step: match the scale of y/f, probe one
// explicit Euler step to estimate the second derivative, take the more
// conservative of the two guesses.
double initial_step(const Field& f, const Mat& y0, const Mat& k1, double T,
                    double rtol, double atol, long& nfe) {
  const auto sc = (atol + rtol * y0.array().abs()).eval();
  const double dnf = ((k1.array() / sc).square()).sum();
  const double dny = ((y0.array() / sc).square()).sum();
  double h0 = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : 0.01 * std::sqrt(dny / dnf);
  h0 = std::min(h0, T);
  const Mat y1 = y0 + h0 * k1;
  const Mat f1 = f(h0, y1);
  ++nfe;
  const double der2 = std::sqrt(((f1 - k1).array() / sc).square().sum()) / h0;
  const double der12 = std::max(der2, std::sqrt(dnf));
  const double h1 = (der12 <= 1e-15) ? std::max(1e-6, h0 * 1e-3)
                                     : std::pow(0.01 / der12, 0.2);
  return std::min({100.0 * h0, h1, T});
}

SolveRecord dopri_solve(const Field& f, const Mat& Y0, double T,
                        const SolverConfig& cfg) {
  constexpr double safe = 0.9, facl = 0.2, facr = 10.0, beta = 0.04;
  const double expo1 = 0.2 - beta * 0.75;
  const double n_entries = static_cast<double>(Y0.size());

  SolveRecord rec;
  rec.method = Method::Dopri5;
  rec.T = T;
  rec.times.push_back(0.0);
  rec.states.push_back(Y0);

  Mat y = Y0;
  double t = 0.0;
  Mat k1 = f(t, y);
  rec.nfe += 1;
  check_finite(k1, 0.0);
  double h = initial_step(f, y, k1, T, cfg.rtol, cfg.atol, rec.nfe);
  double facold = 1e-4;
  bool rejected = false;
  long evals_guard = 0;

  while (t < T) {
    if (rec.steps() >= cfg.max_steps || ++evals_guard > 10 * cfg.max_steps)
      throw NumericalError("adaptive solve exceeded the step budget");
    if (h < 1e-14 * T)
      throw NumericalError("adaptive step size underflow near t=" +
                           std::to_string(t) + " (problem too stiff)");
    bool last = false;
    if (t + 1.01 * h >= T) {
      h = T - t;
      last = true;
    }

    const Mat k2 = f(t + c2 * h, y + h * (a21 * k1));
    const Mat k3 = f(t + c3 * h, y + h * (a31 * k1 + a32 * k2));
    const Mat k4 = f(t + c4 * h, y + h * (a41 * k1 + a42 * k2 + a43 * k3));
    const Mat k5 =
        f(t + c5 * h, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const Mat ys =
        y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    const Mat k6 = f(t + h, ys);
    Mat ynew = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    const Mat k7 = f(t + h, ynew);
    rec.nfe += 6;

    const Mat errv =
        h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const auto sc =
        (cfg.atol + cfg.rtol * y.array().abs().max(ynew.array().abs())).eval();
    double err = std::sqrt(((errv.array() / sc).square()).sum() / n_entries);
    if (!std::isfinite(err) || !ynew.allFinite()) err = 1e10;

    const double fac11 = std::pow(err, expo1);
    if (err <= 1.0) {
      // accept; PI controller with memory of the previous error
      double fac = fac11 / std::pow(facold, beta);
      fac = std::max(1.0 / facr, std::min(1.0 / facl, fac / safe));
      double hnew = h / fac;
      facold = std::max(err, 1e-4);

      SolveRecord::DenseSeg seg;
      seg.t0 = t;
      seg.h = h;
      const Mat ydiff = ynew - y;
      const Mat bspl = h * k1 - ydiff;
      seg.r[0] = y;
      seg.r[1] = ydiff;
      seg.r[2] = bspl;
      seg.r[3] = ydiff - h * k7 - bspl;
      seg.r[4] =
          h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
      rec.dense.push_back(std::move(seg));

      k1 = k7;  // first-same-as-last
      t = last ? T : t + h;
      y = std::move(ynew);
      rec.times.push_back(t);
      rec.states.push_back(y);
      if (rejected) hnew = std::min(hnew, h);
      rejected = false;
      h = hnew;
    } else {
      h = h / std::min(1.0 / facl, fac11 / safe);
      rejected = true;
    }
  }
  return rec;
}

Field make_field(const ControlGrid& grid, TraceMode trace, const Mat* eps) {
  if (trace == TraceMode::None) {
    return [&grid](double t, const Mat& Y) {
      return forward(grid.layer, eval_theta(grid, t), Y, t);
    };
  }
  require(trace != TraceMode::Hutchinson || eps != nullptr,
          "hutchinson mode needs a probe matrix");
  const Mat eps_copy = eps ? *eps : Mat();
  return [&grid, trace, eps_copy](double t, const Mat& Ya) {
    const Index n = Ya.rows() - 1;
    const Mat Ys = Ya.topRows(n);
    Vec tr;
    Mat out(Ya.rows(), Ya.cols());
    out.topRows(n) = stage_eval(grid.layer, eval_theta(grid, t), Ys, t, trace,
                                eps_copy.size() ? &eps_copy : nullptr, &tr);
    out.row(n) = -tr.transpose();
    return out;
  };
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::Euler: return "euler";
    case Method::Rk4: return "rk4";
    case Method::Dopri5: return "dopri5";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "euler") return Method::Euler;
  if (s == "rk4") return Method::Rk4;
  if (s == "dopri5") return Method::Dopri5;
  throw ConfigError("unknown method '" + s + "' (expected euler|rk4|dopri5)");
}

long fixed_step_count(double T, double h) {
  if (!(T > 0.0)) throw ConfigError("horizon T must be positive");
  if (!(h > 0.0)) throw ConfigError("fixed-step solves need a step size h > 0");
  const double d = T / h;
  const long N = std::llround(d);
  // loose enough for horizons assembled from rounded segment arithmetic
  // (adjoint sub-intervals), far below any ambiguous step count
  const double slack = 1e-9 * std::max(1.0, d);
  if (N < 1 || std::abs(d - static_cast<double>(N)) > slack)
    throw ConfigError("T/h must be an integer step count, got T/h=" +
                      std::to_string(d));
  return N;
}

Mat SolveRecord::terminal_y() const {
  const Mat& s = states.back();
  return has_g ? Mat(s.topRows(s.rows() - 1)) : s;
}

Vec SolveRecord::terminal_g() const {
  require(has_g, "record has no log-density channel");
  return states.back().row(states.back().rows() - 1).transpose();
}

Mat SolveRecord::state_at(double t) const {
  require(!states.empty(), "empty record");
  const double tol = 1e-9 * std::max(1.0, T);
  require(t >= -tol && t <= T + tol, "query time outside the record horizon");
  const double tc = std::clamp(t, 0.0, times.back());

  if (!dense.empty()) {
    auto it = std::upper_bound(
        dense.begin(), dense.end(), tc,
        [](double v, const DenseSeg& s) { return v < s.t0; });
    const long i =
        std::clamp<long>((it - dense.begin()) - 1, 0,
                         static_cast<long>(dense.size()) - 1);
    const DenseSeg& s = dense[i];
    const double th = (tc - s.t0) / s.h;
    const double th1 = 1.0 - th;
    return s.r[0] +
           th * (s.r[1] + th1 * (s.r[2] + th * (s.r[3] + th1 * s.r[4])));
  }

  const long N = steps();
  const long j = std::clamp<long>(static_cast<long>(std::floor(tc / h)), 0, N - 1);
  const double s = (tc - times[j]) / h;
  if (s <= 0.0) return states[j];
  if (s >= 1.0) return states[j + 1];
  if (stages.empty())  // no derivatives recorded: fall back to linear
    return (1.0 - s) * states[j] + s * states[j + 1];

  // cubic Hermite; derivative at the right node comes from the next step's
  // first stage, or this step's last stage on the final interval
  const Mat& fa = stages[j][0];
  const Mat& fb = (j + 1 < static_cast<long>(stages.size()))
                      ? stages[j + 1][0]
                      : stages[j].back();
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * states[j] + ((s3 - 2 * s2 + s) * h) * fa +
         (-2 * s3 + 3 * s2) * states[j + 1] + ((s3 - s2) * h) * fb;
}

SolveRecord integrate_field(const Field& f, const Mat& Y0, double T,
                            const SolverConfig& cfg, bool store_stages) {
  require(Y0.size() > 0, "initial state is empty");
  if (cfg.method == Method::Dopri5) return dopri_solve(f, Y0, T, cfg);
  return fixed_solve(f, Y0, T, cfg, store_stages);
}

SolveRecord ode_solve(const ControlGrid& grid, const Mat& Y0, double T,
                      const SolverConfig& cfg, bool store_stages) {
  require(Y0.rows() == grid.layer.dim(), "state dimension does not match grid");
  return integrate_field(make_field(grid, TraceMode::None, nullptr), Y0, T,
                         cfg, store_stages);
}

SolveRecord euler_solve(const ControlGrid& grid, const Mat& Y0, double T,
                        double h) {
  SolverConfig cfg;
  cfg.method = Method::Euler;
  cfg.h = h;
  return ode_solve(grid, Y0, T, cfg);
}

SolveRecord rk4_solve(const ControlGrid& grid, const Mat& Y0, double T,
                      double h) {
  SolverConfig cfg;
  cfg.method = Method::Rk4;
  cfg.h = h;
  return ode_solve(grid, Y0, T, cfg);
}

SolveRecord dopri5_solve(const ControlGrid& grid, const Mat& Y0, double T,
                         double rtol, double atol) {
  SolverConfig cfg;
  cfg.method = Method::Dopri5;
  cfg.rtol = rtol;
  cfg.atol = atol;
  return ode_solve(grid, Y0, T, cfg);
}

SolveRecord cnf_solve(const ControlGrid& grid, const Mat& Y0, double T,
                      const SolverConfig& cfg, TraceMode trace, const Mat* eps,
                      bool store_stages) {
  require(Y0.rows() == grid.layer.dim(), "state dimension does not match grid");
  require(trace != TraceMode::None, "log-density solve needs a trace mode");
  Mat Ya(Y0.rows() + 1, Y0.cols());
  Ya.topRows(Y0.rows()) = Y0;
  Ya.row(Y0.rows()).setZero();
  SolveRecord rec = integrate_field(make_field(grid, trace, eps), Ya, T, cfg,
                                    store_stages);
  rec.has_g = true;
  rec.trace = trace;
  if (eps) rec.eps = *eps;
  return rec;
}

SolveRecord inverse_solve(const ControlGrid& grid, const Mat& YT, double T,
                          const SolverConfig& cfg) {
  require(YT.rows() == grid.layer.dim(), "state dimension does not match grid");
  const Field rev = [&grid, T](double tau, const Mat& Y) {
    return (-forward(grid.layer, eval_theta(grid, T - tau), Y, T - tau)).eval();
  };
  return integrate_field(rev, YT, T, cfg, false);
}

}  // namespace odeflow
