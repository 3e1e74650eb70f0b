#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "odeflow/dynamics.hpp"
#include "odeflow/rng.hpp"

using namespace odeflow;
using Catch::Approx;

namespace {

// Central finite difference of a scalar function of one flat vector.
template <typename F>
double central_fd(F&& f, const Vec& x, const Vec& dir, double eps) {
  return (f(x + eps * dir) - f(x - eps * dir)) / (2.0 * eps);
}

DynamicsLayer tiny_layer(DynamicsLayer::Kind kind) {
  switch (kind) {
    case DynamicsLayer::Kind::Linear: return DynamicsLayer::linear(3);
    case DynamicsLayer::Kind::CubicMlp: return DynamicsLayer::cubic_mlp(3, 4);
    case DynamicsLayer::Kind::ConcatSquash:
      return DynamicsLayer::concatsquash(3, 4, 2, 1, Gate::Tanh);
  }
  throw ContractError("unreachable");
}

const DynamicsLayer::Kind kAllKinds[] = {DynamicsLayer::Kind::Linear,
                                         DynamicsLayer::Kind::CubicMlp,
                                         DynamicsLayer::Kind::ConcatSquash};

}  // namespace

TEST_CASE("parameter counts follow the flat layouts", "[dynamics]") {
  REQUIRE(DynamicsLayer::linear(3).param_count() == 12);
  REQUIRE(DynamicsLayer::cubic_mlp(2, 5).param_count() == 27);
  // per gated layer: in*out + 4*out; widths 2->64->64->64->2
  REQUIRE(DynamicsLayer::concatsquash(2, 64, 3).param_count() ==
          (2 * 64 + 4 * 64) + 2 * (64 * 64 + 4 * 64) + (64 * 2 + 4 * 2));
  REQUIRE(DynamicsLayer::concatsquash(2, 64, 3, 2).param_count() ==
          2 * DynamicsLayer::concatsquash(2, 64, 3).param_count());
}

TEST_CASE("linear field reproduces A y + b", "[dynamics]") {
  const auto layer = DynamicsLayer::linear(2);
  Vec theta(6);
  theta << -0.1, -2.0, 2.0, -0.1, 0.5, -1.0;  // [vec(A), b] column-major
  Vec y(2);
  y << 2.0, 0.0;

  const Vec l = forward(layer, theta, y, 0.3);
  REQUIRE(l[0] == Approx(0.3).margin(1e-15));   // -0.1*2 + 2*0 + 0.5
  REQUIRE(l[1] == Approx(-5.0).margin(1e-15));  // -2*2 - 0.1*0 - 1

  // the field is autonomous: time must not enter
  REQUIRE(forward(layer, theta, y, 0.0) == forward(layer, theta, y, 5.0));
}

TEST_CASE("cubic mlp matches a loop-evaluated oracle", "[dynamics]") {
  const Index n = 2, m = 3;
  const auto layer = DynamicsLayer::cubic_mlp(n, m);
  Rng rng(3);
  const Vec theta = rng.normal_vec(layer.param_count());
  const Vec y = rng.normal_vec(n);

  // unpack [vec(W1), b1, vec(W2), b2] with explicit index arithmetic
  auto W1 = [&](Index i, Index j) { return theta[j * m + i]; };
  auto b1 = [&](Index i) { return theta[m * n + i]; };
  auto W2 = [&](Index i, Index j) { return theta[m * n + m + j * n + i]; };
  auto b2 = [&](Index i) { return theta[m * n + m + n * m + i]; };

  Vec want(n);
  for (Index i = 0; i < n; ++i) {
    double acc = b2(i);
    for (Index k = 0; k < m; ++k) {
      double pre = b1(k);
      for (Index j = 0; j < n; ++j) pre += W1(k, j) * y[j] * y[j] * y[j];
      acc += W2(i, k) * std::tanh(pre);
    }
    want[i] = acc;
  }

  const Vec got = forward(layer, theta, y, 0.7);
  REQUIRE((got - want).lpNorm<Eigen::Infinity>() < 1e-14);
  REQUIRE(forward(layer, theta, y, 0.0) == forward(layer, theta, y, 2.0));
}

TEST_CASE("gated time-affine stack matches a scalar oracle", "[dynamics]") {
  // dim 1, hidden 1, one hidden width -> two gated layers with a tanh
  // between them; ten parameters [w2,b2,w1,b1,w0] per layer.
  Vec theta(10);
  theta << 1.2, -0.3, 0.7, 0.1, -0.5, 0.9, 0.2, -1.1, 0.4, 0.3;
  const double y = 0.6, t = 0.8;

  auto gated = [&](double in, Index off, double gate_of_a) {
    const double pre = theta[off] * in + theta[off + 1];
    return pre * gate_of_a + theta[off + 4] * t;
  };

  SECTION("tanh gate") {
    const auto layer = DynamicsLayer::concatsquash(1, 1, 1, 1, Gate::Tanh);
    REQUIRE(layer.param_count() == 10);
    const double s =
        std::tanh(gated(y, 0, std::tanh(theta[2] * t + theta[3])));
    const double want = gated(s, 5, std::tanh(theta[7] * t + theta[8]));
    const Vec got = forward(layer, theta, Vec(Vec::Constant(1, y)), t);
    REQUIRE(got[0] == Approx(want).margin(1e-14));
  }

  SECTION("sigmoid gate") {
    const auto layer = DynamicsLayer::concatsquash(1, 1, 1, 1, Gate::Sigmoid);
    auto sigmoid = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
    const double s = std::tanh(gated(y, 0, sigmoid(theta[2] * t + theta[3])));
    const double want = gated(s, 5, sigmoid(theta[7] * t + theta[8]));
    const Vec got = forward(layer, theta, Vec(Vec::Constant(1, y)), t);
    REQUIRE(got[0] == Approx(want).margin(1e-14));
  }
}

TEST_CASE("time enters the gated stack", "[dynamics]") {
  const auto layer = DynamicsLayer::concatsquash(2, 3, 1);
  Rng rng(4);
  const Vec theta = rng.normal_vec(layer.param_count());
  const Vec y = rng.normal_vec(2);
  REQUIRE((forward(layer, theta, y, 0.1) - forward(layer, theta, y, 0.9))
              .norm() > 1e-6);
}

TEST_CASE("batched evaluation agrees column by column", "[dynamics]") {
  Rng rng(11);
  for (auto kind : kAllKinds) {
    const auto layer = tiny_layer(kind);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Mat Y = rng.normal_mat(layer.dim(), 5);
    const double t = 0.4;

    const Mat L = forward(layer, theta, Y, t);
    const Vec tr = exact_trace(layer, theta, Y, t);
    for (Index b = 0; b < Y.cols(); ++b) {
      const Vec lb = forward(layer, theta, Vec(Y.col(b)), t);
      REQUIRE((L.col(b) - lb).lpNorm<Eigen::Infinity>() < 1e-13);
      REQUIRE(tr[b] ==
              Approx(exact_trace(layer, theta, Vec(Y.col(b)), t)).margin(1e-12));
    }
  }
}

TEST_CASE("state jvp matches finite differences", "[dynamics]") {
  Rng rng(21);
  for (auto kind : kAllKinds) {
    const auto layer = tiny_layer(kind);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Vec y = rng.normal_vec(layer.dim());
    const Vec u = rng.normal_vec(layer.dim());
    const double t = 0.25, eps = 1e-6;

    const Vec got = jvp_state(layer, theta, y, t, u);
    const Vec fd = (forward(layer, theta, Vec(y + eps * u), t) -
                    forward(layer, theta, Vec(y - eps * u), t)) /
                   (2.0 * eps);
    REQUIRE((got - fd).lpNorm<Eigen::Infinity>() < 1e-7);
  }
}

TEST_CASE("vjp is the exact adjoint of jvp", "[dynamics]") {
  Rng rng(22);
  for (auto kind : kAllKinds) {
    const auto layer = tiny_layer(kind);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Mat Y = rng.normal_mat(layer.dim(), 3);
    const Mat U = rng.normal_mat(layer.dim(), 3);
    const Mat Z = rng.normal_mat(layer.dim(), 3);
    const double t = 0.6;

    // <Z, J U> == <J^T Z, U> must hold to rounding, not just to FD accuracy
    const double a = (Z.array() * jvp_state(layer, theta, Y, t, U).array()).sum();
    const double b = (vjp_state(layer, theta, Y, t, Z).array() * U.array()).sum();
    REQUIRE(a == Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("parameter cotangent matches finite differences", "[dynamics]") {
  Rng rng(23);
  for (auto kind : kAllKinds) {
    const auto layer = tiny_layer(kind);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Mat Y = rng.normal_mat(layer.dim(), 2);
    const Mat Z = rng.normal_mat(layer.dim(), 2);
    const double t = 0.35;

    const Vec grad = vjp_params(layer, theta, Y, t, Z);
    REQUIRE(grad.size() == layer.param_count());

    Vec dir = rng.normal_vec(layer.param_count());
    dir /= dir.norm();
    auto phi = [&](const Vec& th) {
      return (Z.array() * forward(layer, th, Y, t).array()).sum();
    };
    const double fd = central_fd(phi, theta, dir, 1e-6);
    REQUIRE(grad.dot(dir) == Approx(fd).margin(1e-7));
  }
}

TEST_CASE("exact divergence equals the Jacobian trace", "[dynamics]") {
  SECTION("linear field: trace of A") {
    const auto layer = DynamicsLayer::linear(2);
    Vec theta(6);
    theta << -0.1, -2.0, 2.0, -0.1, 0.5, -1.0;
    const Vec y = Vec::Constant(2, 0.3);
    REQUIRE(exact_trace(layer, theta, y, 0.0) == Approx(-0.2).margin(1e-15));
  }

  SECTION("identity field: trace is the dimension") {
    const auto layer = DynamicsLayer::linear(4);
    Vec theta = Vec::Zero(layer.param_count());
    for (Index i = 0; i < 4; ++i) theta[i * 4 + i] = 1.0;
    REQUIRE(exact_trace(layer, theta, Vec(Vec::Ones(4)), 1.0) == 4.0);
  }

  SECTION("nonlinear fields: diagonal finite differences") {
    Rng rng(31);
    for (auto kind : kAllKinds) {
      const auto layer = tiny_layer(kind);
      const Vec theta = rng.normal_vec(layer.param_count());
      const Vec y = rng.normal_vec(layer.dim());
      const double t = 0.45, eps = 1e-6;

      double fd = 0.0;
      for (Index i = 0; i < layer.dim(); ++i) {
        Vec e = Vec::Zero(layer.dim());
        e[i] = 1.0;
        fd += (forward(layer, theta, Vec(y + eps * e), t)[i] -
               forward(layer, theta, Vec(y - eps * e), t)[i]) /
              (2.0 * eps);
      }
      REQUIRE(exact_trace(layer, theta, y, t) == Approx(fd).margin(1e-7));
    }
  }
}

TEST_CASE("stochastic divergence has the quadratic-form semantics", "[dynamics]") {
  Rng rng(32);

  SECTION("a basis probe picks out one diagonal entry") {
    const auto layer = DynamicsLayer::linear(3);
    const Vec theta = rng.normal_vec(layer.param_count());
    Vec e1 = Vec::Zero(3);
    e1[0] = 1.0;
    REQUIRE(hutchinson_trace(layer, theta, Vec(Vec::Zero(3)), 0.0, e1) ==
            Approx(theta[0]).margin(1e-15));  // A(0,0)
  }

  SECTION("scaled identity field is estimated exactly by any sign probe") {
    const auto layer = DynamicsLayer::linear(3);
    Vec theta = Vec::Zero(layer.param_count());
    for (Index i = 0; i < 3; ++i) theta[i * 3 + i] = 0.7;
    const Mat eps = rng.rademacher_mat(3, 4);
    const Vec est =
        hutchinson_trace(layer, theta, Mat(Mat::Zero(3, 4)), 0.0, eps);
    for (Index b = 0; b < 4; ++b) REQUIRE(est[b] == Approx(2.1).margin(1e-14));
  }

  SECTION("averaging all sign probes recovers the exact divergence") {
    // in 2 dimensions the four Rademacher probes cancel every off-diagonal
    // Jacobian entry, so their mean equals the trace for any field
    const auto layer = DynamicsLayer::cubic_mlp(2, 3);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Vec y = rng.normal_vec(2);
    const double signs[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
    double mean = 0.0;
    for (const auto& s : signs) {
      Vec eps(2);
      eps << s[0], s[1];
      mean += hutchinson_trace(layer, theta, y, 0.0, eps) / 4.0;
    }
    REQUIRE(mean == Approx(exact_trace(layer, theta, y, 0.0)).epsilon(1e-12));
  }
}

TEST_CASE("fused stage evaluation reproduces the separate calls", "[dynamics]") {
  Rng rng(41);
  for (auto kind : kAllKinds) {
    const auto layer = tiny_layer(kind);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Mat Y = rng.normal_mat(layer.dim(), 4);
    const Mat eps = rng.rademacher_mat(layer.dim(), 4);
    const double t = 0.15;

    const Mat plain = forward(layer, theta, Y, t);

    Mat got = stage_eval(layer, theta, Y, t, TraceMode::None, nullptr, nullptr);
    REQUIRE((got - plain).lpNorm<Eigen::Infinity>() == 0.0);

    Vec tr;
    got = stage_eval(layer, theta, Y, t, TraceMode::Exact, nullptr, &tr);
    REQUIRE((got - plain).lpNorm<Eigen::Infinity>() < 1e-13);
    REQUIRE((tr - exact_trace(layer, theta, Y, t)).lpNorm<Eigen::Infinity>() <
            1e-13);

    got = stage_eval(layer, theta, Y, t, TraceMode::Hutchinson, &eps, &tr);
    REQUIRE((got - plain).lpNorm<Eigen::Infinity>() < 1e-13);
    REQUIRE((tr - hutchinson_trace(layer, theta, Y, t, eps))
                .lpNorm<Eigen::Infinity>() < 1e-13);
  }
}

TEST_CASE("stage reverse sweep differentiates velocity and divergence",
          "[dynamics]") {
  // phi(theta, Y) = sum_b Z_b . l(theta, y_b, t) + sum_b mu_b * div_b where
  // div is the estimator selected by the mode; check the returned state
  // cotangent and the accumulated parameter cotangent against central
  // differences of phi computed through stage_eval itself.
  Rng rng(42);
  const double t = 0.55, eps_fd = 1e-6;

  for (auto kind : kAllKinds) {
    const auto layer = tiny_layer(kind);
    const Vec theta = rng.normal_vec(layer.param_count());
    const Mat Y = rng.normal_mat(layer.dim(), 3);
    const Mat Z = rng.normal_mat(layer.dim(), 3);
    const Vec mu = rng.normal_vec(3);
    const Mat probes = rng.rademacher_mat(layer.dim(), 3);

    for (TraceMode mode :
         {TraceMode::None, TraceMode::Exact, TraceMode::Hutchinson}) {
      const Mat* pe = mode == TraceMode::Hutchinson ? &probes : nullptr;
      const Vec* pmu = mode == TraceMode::None ? nullptr : &mu;

      auto phi = [&](const Vec& th, const Mat& Ys) {
        Vec tr;
        const Mat L = stage_eval(layer, th, Ys, t, mode, pe,
                                 mode == TraceMode::None ? nullptr : &tr);
        double v = (Z.array() * L.array()).sum();
        if (mode != TraceMode::None) v += mu.dot(tr);
        return v;
      };

      Vec theta_bar = Vec::Zero(layer.param_count());
      const Mat state_bar =
          stage_vjp(layer, theta, Y, t, Z, pmu, mode, pe, theta_bar);

      Vec dth = rng.normal_vec(layer.param_count());
      dth /= dth.norm();
      const double fd_th = (phi(theta + eps_fd * dth, Y) -
                            phi(theta - eps_fd * dth, Y)) /
                           (2.0 * eps_fd);
      REQUIRE(theta_bar.dot(dth) == Approx(fd_th).margin(2e-6));

      Mat dY = rng.normal_mat(layer.dim(), 3);
      dY /= dY.norm();
      const double fd_y =
          (phi(theta, Y + eps_fd * dY) - phi(theta, Y - eps_fd * dY)) /
          (2.0 * eps_fd);
      REQUIRE((state_bar.array() * dY.array()).sum() ==
              Approx(fd_y).margin(2e-6));
    }
  }
}

TEST_CASE("theta_bar accumulates across stage calls", "[dynamics]") {
  const auto layer = DynamicsLayer::linear(2);
  Rng rng(43);
  const Vec theta = rng.normal_vec(layer.param_count());
  const Mat Y = rng.normal_mat(2, 2);
  const Mat Z = rng.normal_mat(2, 2);

  Vec once = Vec::Zero(layer.param_count());
  stage_vjp(layer, theta, Y, 0.0, Z, nullptr, TraceMode::None, nullptr, once);
  Vec twice = once;
  stage_vjp(layer, theta, Y, 0.0, Z, nullptr, TraceMode::None, nullptr, twice);
  REQUIRE((twice - 2.0 * once).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("shape violations are rejected", "[dynamics]") {
  const auto layer = DynamicsLayer::linear(2);
  const Vec theta = Vec::Zero(layer.param_count());
  const Vec y = Vec::Zero(2);

  REQUIRE_THROWS_AS(forward(layer, Vec(Vec::Zero(5)), y, 0.0), ContractError);
  REQUIRE_THROWS_AS(forward(layer, theta, Vec(Vec::Zero(3)), 0.0), ContractError);
  REQUIRE_THROWS_AS(
      hutchinson_trace(layer, theta, Mat(y), 0.0, Mat::Ones(3, 1)),
      ContractError);
  REQUIRE_THROWS_AS(
      stage_eval(layer, theta, Mat(y), 0.0, TraceMode::Hutchinson, nullptr,
                 nullptr),
      ContractError);

  const auto big = DynamicsLayer::linear(65);
  REQUIRE_THROWS_AS(
      exact_trace(big, Vec(Vec::Zero(big.param_count())), Vec(Vec::Zero(65)), 0.0),
      ContractError);

  Vec small_bar = Vec::Zero(3);
  REQUIRE_THROWS_AS(stage_vjp(layer, theta, Mat(y), 0.0, Mat(y), nullptr,
                              TraceMode::None, nullptr, small_bar),
                    ContractError);
}

TEST_CASE("gate names round trip", "[dynamics]") {
  REQUIRE(to_string(Gate::Tanh) == "tanh");
  REQUIRE(to_string(Gate::Sigmoid) == "sigmoid");
  REQUIRE(gate_from_string("tanh") == Gate::Tanh);
  REQUIRE(gate_from_string("sigmoid") == Gate::Sigmoid);
  REQUIRE_THROWS_AS(gate_from_string("relu"), ConfigError);
}
