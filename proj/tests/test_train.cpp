#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "odeflow/rng.hpp"
#include "odeflow/train.hpp"

using namespace odeflow;
using Catch::Approx;

namespace {

// Small trajectory-fitting problem shared by the loop tests.
struct Setup {
  ControlGrid grid;
  Objective obj;
  Mat y0;
  BatchSampler batch;
};

Setup make_setup(std::uint64_t seed) {
  Setup s{make_control_grid(DynamicsLayer::cubic_mlp(2, 3), 1.0, 1),
          Objective(), Mat(), nullptr};
  glorot_init(s.grid, seed);
  Rng rng(seed + 1);
  s.obj = Objective::regression(0.3 * rng.normal_mat(2, 5), 0.25);
  s.y0 = rng.normal_mat(2, 2);
  s.batch = [y0 = s.y0](long) { return y0; };
  return s;
}

SolverConfig rk4_at(double h) {
  SolverConfig c;
  c.method = Method::Rk4;
  c.h = h;
  return c;
}

}  // namespace

TEST_CASE("adam stays put on a zero gradient", "[train]") {
  AdamState st;
  AdamConfig cfg;
  Vec p = Vec::Constant(3, 1.5);
  adam_step(st, cfg, p, Vec::Zero(3));
  REQUIRE(p == Vec::Constant(3, 1.5));
  REQUIRE(st.step == 1);
}

TEST_CASE("the first adam step moves by the learning rate", "[train]") {
  // with bias correction the first update is lr * g / (|g| + eps), i.e.
  // very nearly a signed step of size lr for any healthy gradient
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.05;
  Vec p = Vec::Zero(2);
  Vec g(2);
  g << 3.0, -0.2;
  adam_step(st, cfg, p, g);
  REQUIRE(p[0] == Approx(-0.05).margin(1e-8));
  REQUIRE(p[1] == Approx(0.05).margin(1e-7));
}

TEST_CASE("adam is deterministic and stateful", "[train]") {
  AdamConfig cfg;
  Rng rng(81);
  const Vec g1 = rng.normal_vec(4), g2 = rng.normal_vec(4);

  AdamState a, b;
  Vec pa = Vec::Ones(4), pb = Vec::Ones(4);
  adam_step(a, cfg, pa, g1);
  adam_step(a, cfg, pa, g2);
  adam_step(b, cfg, pb, g1);
  adam_step(b, cfg, pb, g2);
  REQUIRE(pa == pb);
  REQUIRE(a.step == 2);

  // state matters: replaying g2 on fresh state lands somewhere else
  AdamState c;
  Vec pc = Vec::Ones(4);
  adam_step(c, cfg, pc, g1);
  AdamState d;
  Vec pd = pc;
  adam_step(d, cfg, pd, g2);
  adam_step(c, cfg, pc, g2);
  REQUIRE(pc != pd);
}

TEST_CASE("plain gradient descent applies the literal update", "[train]") {
  Vec p(2);
  p << 1.0, -2.0;
  Vec g(2);
  g << 0.5, 0.25;
  sgd_step(0.1, p, g);
  REQUIRE(p[0] == Approx(0.95).margin(1e-16));
  REQUIRE(p[1] == Approx(-2.025).margin(1e-16));

  REQUIRE_THROWS_AS(sgd_step(0.1, p, Vec::Zero(3)), ContractError);
  AdamState st;
  AdamConfig cfg;
  REQUIRE_THROWS_AS(adam_step(st, cfg, p, Vec::Zero(3)), ContractError);
}

TEST_CASE("training reduces the objective and is reproducible", "[train]") {
  const auto s = make_setup(82);
  TrainConfig cfg;
  cfg.engine = Engine::DiscOpt;
  cfg.phases = {{30, rk4_at(0.05), 0.05}};

  const auto r1 = train(s.grid, s.obj, s.batch, cfg);
  REQUIRE(r1.log.rows.size() == 30);
  REQUIRE(r1.log.rows.back().loss < 0.5 * r1.log.rows.front().loss);

  const auto r2 = train(s.grid, s.obj, s.batch, cfg);
  REQUIRE(flatten(r1.grid) == flatten(r2.grid));
  for (size_t i = 0; i < r1.log.rows.size(); ++i) {
    REQUIRE(r1.log.rows[i].loss == r2.log.rows[i].loss);
    REQUIRE(r1.log.rows[i].cum_nfe == r2.log.rows[i].cum_nfe);
  }
}

TEST_CASE("both engines see the same objective value at the start", "[train]") {
  const auto s = make_setup(83);

  TrainConfig disc;
  disc.engine = Engine::DiscOpt;
  disc.phases = {{1, rk4_at(0.05), 0.01}};
  const auto a = train(s.grid, s.obj, s.batch, disc);

  TrainConfig cont = disc;
  cont.engine = Engine::OptDisc;
  cont.backward = rk4_at(0.05);
  const auto b = train(s.grid, s.obj, s.batch, cont);

  // identical forward solves score identical losses before the first update
  REQUIRE(a.log.rows[0].loss == b.log.rows[0].loss);
}

TEST_CASE("an empty phase list is rejected, zero iterations are a no-op",
          "[train]") {
  const auto s = make_setup(84);
  TrainConfig cfg;
  REQUIRE_THROWS_AS(train(s.grid, s.obj, s.batch, cfg), ContractError);

  cfg.phases = {{0, rk4_at(0.25), 0.01}};
  const auto r = train(s.grid, s.obj, s.batch, cfg);
  REQUIRE(r.log.rows.empty());
  REQUIRE(r.total_nfe == 0);
  REQUIRE(flatten(r.grid) == flatten(s.grid));
}

TEST_CASE("phases run in sequence with exact evaluation accounting",
          "[train]") {
  const auto s = make_setup(85);
  TrainConfig cfg;
  cfg.engine = Engine::DiscOpt;
  cfg.phases = {{5, rk4_at(0.25), 0.02},    // 4 steps -> 16 evals per iteration
                {5, rk4_at(0.125), 0.01}};  // 8 steps -> 32 evals per iteration

  const auto r = train(s.grid, s.obj, s.batch, cfg);
  REQUIRE(r.log.rows.size() == 10);
  for (int i = 0; i < 10; ++i) {
    REQUIRE(r.log.rows[i].iteration == i);
    REQUIRE(r.log.rows[i].phase == (i < 5 ? 0 : 1));
  }
  REQUIRE(r.log.rows[4].cum_nfe == 5 * 16);
  REQUIRE(r.log.rows[9].cum_nfe == 5 * 16 + 5 * 32);
  REQUIRE(r.total_nfe == 240);

  // wall clock is cumulative and non-decreasing
  for (int i = 1; i < 10; ++i)
    REQUIRE(r.log.rows[i].wall_ms >= r.log.rows[i - 1].wall_ms);
}

TEST_CASE("the sgd flag bypasses the moment estimates", "[train]") {
  const auto s = make_setup(86);
  TrainConfig cfg;
  cfg.engine = Engine::DiscOpt;
  cfg.use_sgd = true;
  cfg.phases = {{1, rk4_at(0.25), 0.07}};
  const auto r = train(s.grid, s.obj, s.batch, cfg);

  // replay the single update by hand
  const auto rec = ode_solve(s.grid, s.y0, 1.0, rk4_at(0.25));
  const auto rep = discopt_grad(s.grid, rec, s.obj);
  Vec want = flatten(s.grid);
  sgd_step(0.07, want, rep.grad);
  REQUIRE(flatten(r.grid) == want);
  REQUIRE(r.log.rows[0].loss == rep.loss);
}

TEST_CASE("probe streams are seeded per iteration", "[train]") {
  auto grid = make_control_grid(DynamicsLayer::concatsquash(2, 3, 1), 0.5, 1);
  glorot_init(grid, 87);
  Rng rng(88);
  const Mat y0 = rng.normal_mat(2, 4);

  TrainConfig cfg;
  cfg.engine = Engine::DiscOpt;
  cfg.trace = TraceMode::Hutchinson;
  cfg.phases = {{2, rk4_at(0.1), 0.01}};
  cfg.seed = 7;

  const auto obj = Objective::cnf();
  const BatchSampler batch = [&](long) { return y0; };

  const auto a = train(grid, obj, batch, cfg);
  const auto b = train(grid, obj, batch, cfg);
  REQUIRE(flatten(a.grid) == flatten(b.grid));
  REQUIRE(a.log.rows[0].loss == b.log.rows[0].loss);

  cfg.seed = 8;  // different probe stream, different stochastic estimate
  const auto c = train(grid, obj, batch, cfg);
  REQUIRE(a.log.rows[0].loss != c.log.rows[0].loss);
}

TEST_CASE("diverging optimization raises a numerical error", "[train]") {
  const auto s = make_setup(89);
  TrainConfig cfg;
  cfg.engine = Engine::DiscOpt;
  cfg.use_sgd = true;
  cfg.phases = {{20, rk4_at(0.25), 1e12}};  // absurd step size
  REQUIRE_THROWS_AS(train(s.grid, s.obj, s.batch, cfg), NumericalError);
}

TEST_CASE("engine names round trip", "[train]") {
  REQUIRE(to_string(Engine::DiscOpt) == "disc-opt");
  REQUIRE(to_string(Engine::OptDisc) == "opt-disc");
  REQUIRE(engine_from_string("disc-opt") == Engine::DiscOpt);
  REQUIRE(engine_from_string("opt-disc") == Engine::OptDisc);
  REQUIRE_THROWS_AS(engine_from_string("autograd"), ConfigError);
}
