#include "odeflow/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace odeflow {

using nlohmann::json;

std::string to_string(TraceMode m) {
  switch (m) {
    case TraceMode::None: return "none";
    case TraceMode::Exact: return "exact";
    case TraceMode::Hutchinson: return "hutchinson";
  }
  return "none";
}

TraceMode trace_from_string(const std::string& s) {
  if (s == "none") return TraceMode::None;
  if (s == "exact") return TraceMode::Exact;
  if (s == "hutchinson") return TraceMode::Hutchinson;
  throw ConfigError("unknown trace mode '" + s +
                    "' (expected none|exact|hutchinson)");
}

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& msg) {
  throw ConfigError("config: " + field + ": " + msg);
}

void check_keys(const json& o, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = o.begin(); it != o.end(); ++it)
    if (!ok.count(it.key())) fail(ctx + it.key(), "unknown field");
}

const json* find(const json& o, const char* key) {
  auto it = o.find(key);
  return it == o.end() ? nullptr : &*it;
}

double get_num(const json& o, const char* key, double def,
               const std::string& ctx) {
  const json* v = find(o, key);
  if (!v) return def;
  if (!v->is_number()) fail(ctx + key, "expected a number");
  return v->get<double>();
}

long get_int(const json& o, const char* key, long def, const std::string& ctx) {
  const json* v = find(o, key);
  if (!v) return def;
  if (!v->is_number_integer() && !v->is_number_unsigned())
    fail(ctx + key, "expected an integer");
  return v->get<long>();
}

std::uint64_t get_seed(const json& o, const char* key, std::uint64_t def,
                       const std::string& ctx) {
  const json* v = find(o, key);
  if (!v) return def;
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long>() >= 0))
    fail(ctx + key, "expected a non-negative integer");
  return v->get<std::uint64_t>();
}

bool get_bool(const json& o, const char* key, bool def, const std::string& ctx) {
  const json* v = find(o, key);
  if (!v) return def;
  if (!v->is_boolean()) fail(ctx + key, "expected a boolean");
  return v->get<bool>();
}

std::string get_str(const json& o, const char* key, const std::string& def,
                    const std::string& ctx) {
  const json* v = find(o, key);
  if (!v) return def;
  if (!v->is_string()) fail(ctx + key, "expected a string");
  return v->get<std::string>();
}

SolverConfig parse_solver(const json& o, const std::string& ctx,
                          SolverConfig def) {
  if (!o.is_object()) fail(ctx, "expected an object");
  check_keys(o, ctx + ".", {"method", "h", "rtol", "atol", "max_steps"});
  SolverConfig s = def;
  const std::string method = get_str(o, "method", to_string(s.method), ctx + ".");
  try {
    s.method = method_from_string(method);
  } catch (const std::exception& e) {
    fail(ctx + ".method", e.what());
  }
  s.h = get_num(o, "h", s.h, ctx + ".");
  s.rtol = get_num(o, "rtol", s.rtol, ctx + ".");
  s.atol = get_num(o, "atol", s.atol, ctx + ".");
  s.max_steps = get_int(o, "max_steps", s.max_steps, ctx + ".");
  if (s.method != Method::Dopri5 && !(s.h > 0.0))
    fail(ctx + ".h", "fixed-step method needs a positive step size");
  if (s.rtol <= 0.0 || s.atol <= 0.0)
    fail(ctx + ".rtol", "tolerances must be positive");
  if (s.max_steps <= 0) fail(ctx + ".max_steps", "must be positive");
  return s;
}

// Fields whose useful default depends on the experiment kind.
void apply_experiment_defaults(ExperimentConfig& c) {
  if (c.experiment == "timeseries") {
    c.T = 1.5;
    c.kind = "cubic-mlp";
    c.dim = 2;
    c.hidden = 50;
    c.control_points = 1;
    c.solver = {Method::Rk4, 1.5 / 29.0};
    c.lr = 0.1;
    c.iterations = 300;
    c.batch = 1;
  } else {  // cnf-mixture / cnf-csv
    c.T = 0.5;
    c.kind = "concatsquash";
    c.dim = 2;
    c.hidden = 64;
    c.hidden_layers = 3;
    c.flow_steps = 1;
    c.control_points = 2;
    c.solver = {Method::Rk4, 0.05};
    c.lr = 1e-3;
    c.iterations = 3000;
    c.batch = 512;
  }
  c.backward = {Method::Dopri5, 0.0};
}

void validate_engine_solver(const ExperimentConfig& c, const SolverConfig& s,
                            const std::string& ctx) {
  if (c.engine == Engine::DiscOpt && s.method == Method::Dopri5)
    fail(ctx, "disc-opt engine requires a fixed-step training solver");
  if (s.method != Method::Dopri5) {
    try {
      fixed_step_count(c.T, s.h);
    } catch (const std::exception&) {
      fail(ctx + ".h", "step size must evenly divide T");
    }
  }
}

Mat parse_matrix(const json& v, const std::string& ctx) {
  if (!v.is_array() || v.empty()) fail(ctx, "expected a non-empty array of rows");
  const Index rows = static_cast<Index>(v.size());
  Index cols = -1;
  Mat m;
  for (Index i = 0; i < rows; ++i) {
    const json& row = v[static_cast<std::size_t>(i)];
    if (!row.is_array()) fail(ctx, "expected an array of rows");
    if (cols < 0) {
      cols = static_cast<Index>(row.size());
      m.resize(rows, cols);
    }
    if (static_cast<Index>(row.size()) != cols) fail(ctx, "ragged rows");
    for (Index j = 0; j < cols; ++j) {
      const json& x = row[static_cast<std::size_t>(j)];
      if (!x.is_number()) fail(ctx, "expected numbers");
      m(i, j) = x.get<double>();
    }
  }
  return m;
}

Vec parse_vector(const json& v, const std::string& ctx) {
  if (!v.is_array()) fail(ctx, "expected an array of numbers");
  Vec out(static_cast<Index>(v.size()));
  for (Index i = 0; i < out.size(); ++i) {
    const json& x = v[static_cast<std::size_t>(i)];
    if (!x.is_number()) fail(ctx, "expected numbers");
    out[i] = x.get<double>();
  }
  return out;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  check_keys(doc, "",
             {"experiment", "engine", "seed", "T", "control_points", "alpha",
              "network", "solver", "backward", "trace", "use_stored_trajectory",
              "optimizer", "multilevel", "data"});

  ExperimentConfig c;
  const json* exp = find(doc, "experiment");
  if (!exp) fail("experiment", "missing required field");
  if (!exp->is_string()) fail("experiment", "expected a string");
  c.experiment = exp->get<std::string>();
  if (c.experiment != "timeseries" && c.experiment != "cnf-mixture" &&
      c.experiment != "cnf-csv")
    fail("experiment", "unknown experiment '" + c.experiment +
                           "' (expected timeseries|cnf-mixture|cnf-csv)");
  apply_experiment_defaults(c);

  try {
    c.engine = engine_from_string(get_str(doc, "engine", to_string(c.engine), ""));
  } catch (const std::exception& e) {
    fail("engine", e.what());
  }
  c.seed = get_seed(doc, "seed", c.seed, "");
  c.T = get_num(doc, "T", c.T, "");
  if (!(c.T > 0.0)) fail("T", "must be positive");
  c.control_points = get_int(doc, "control_points", c.control_points, "");
  if (c.control_points < 1) fail("control_points", "must be at least 1");
  c.alpha = get_num(doc, "alpha", c.alpha, "");
  if (c.alpha < 0.0) fail("alpha", "must be non-negative");

  if (const json* net = find(doc, "network")) {
    if (!net->is_object()) fail("network", "expected an object");
    check_keys(*net, "network.",
               {"kind", "dim", "hidden", "hidden_layers", "flow_steps", "gate"});
    c.kind = get_str(*net, "kind", c.kind, "network.");
    if (c.kind != "linear" && c.kind != "cubic-mlp" && c.kind != "concatsquash")
      fail("network.kind", "unknown kind '" + c.kind +
                               "' (expected linear|cubic-mlp|concatsquash)");
    c.dim = get_int(*net, "dim", c.dim, "network.");
    c.hidden = get_int(*net, "hidden", c.hidden, "network.");
    c.hidden_layers = static_cast<int>(
        get_int(*net, "hidden_layers", c.hidden_layers, "network."));
    c.flow_steps =
        static_cast<int>(get_int(*net, "flow_steps", c.flow_steps, "network."));
    try {
      c.gate = gate_from_string(get_str(*net, "gate", to_string(c.gate), "network."));
    } catch (const std::exception& e) {
      fail("network.gate", e.what());
    }
  }

  try {
    c.trace = trace_from_string(get_str(doc, "trace", to_string(c.trace), ""));
  } catch (const std::exception& e) {
    fail("trace", e.what());
  }
  c.use_stored_trajectory =
      get_bool(doc, "use_stored_trajectory", c.use_stored_trajectory, "");

  if (const json* opt = find(doc, "optimizer")) {
    if (!opt->is_object()) fail("optimizer", "expected an object");
    check_keys(*opt, "optimizer.",
               {"method", "lr", "iterations", "batch", "beta1", "beta2", "eps"});
    const std::string method = get_str(*opt, "method", "adam", "optimizer.");
    if (method != "adam" && method != "sgd")
      fail("optimizer.method", "expected adam|sgd");
    c.use_sgd = method == "sgd";
    c.lr = get_num(*opt, "lr", c.lr, "optimizer.");
    if (!(c.lr > 0.0)) fail("optimizer.lr", "must be positive");
    c.iterations = get_int(*opt, "iterations", c.iterations, "optimizer.");
    if (c.iterations < 0) fail("optimizer.iterations", "must be non-negative");
    c.batch = get_int(*opt, "batch", c.batch, "optimizer.");
    if (c.batch < 1) fail("optimizer.batch", "must be positive");
    c.adam.beta1 = get_num(*opt, "beta1", c.adam.beta1, "optimizer.");
    c.adam.beta2 = get_num(*opt, "beta2", c.adam.beta2, "optimizer.");
    c.adam.eps = get_num(*opt, "eps", c.adam.eps, "optimizer.");
  }

  if (const json* data = find(doc, "data")) {
    if (!data->is_object()) fail("data", "expected an object");
    check_keys(*data, "data.",
               {"modes", "radius", "sigma", "csv_path", "test_samples",
                "inverse_samples", "A", "u0", "n_points", "rtol", "atol"});
    c.mixture.modes = static_cast<int>(get_int(*data, "modes", c.mixture.modes, "data."));
    if (c.mixture.modes < 1) fail("data.modes", "must be positive");
    c.mixture.radius = get_num(*data, "radius", c.mixture.radius, "data.");
    c.mixture.sigma = get_num(*data, "sigma", c.mixture.sigma, "data.");
    if (!(c.mixture.sigma > 0.0)) fail("data.sigma", "must be positive");
    c.csv_path = get_str(*data, "csv_path", c.csv_path, "data.");
    c.test_samples = get_int(*data, "test_samples", c.test_samples, "data.");
    c.inverse_samples =
        get_int(*data, "inverse_samples", c.inverse_samples, "data.");
    if (c.test_samples < 1 || c.inverse_samples < 1)
      fail("data.test_samples", "sample counts must be positive");
    if (const json* A = find(*data, "A")) {
      const Mat m = parse_matrix(*A, "data.A");
      if (m.rows() != m.cols()) fail("data.A", "must be square");
      c.timeseries.A = m;
    }
    if (const json* u0 = find(*data, "u0"))
      c.timeseries.u0 = parse_vector(*u0, "data.u0");
    if (c.timeseries.u0.size() != c.timeseries.A.rows())
      fail("data.u0", "size must match A");
    c.timeseries.n_points = get_int(*data, "n_points", c.timeseries.n_points, "data.");
    if (c.timeseries.n_points < 2) fail("data.n_points", "need at least 2 points");
    c.timeseries.rtol = get_num(*data, "rtol", c.timeseries.rtol, "data.");
    c.timeseries.atol = get_num(*data, "atol", c.timeseries.atol, "data.");
  }
  c.timeseries.T = c.T;
  if (c.experiment == "timeseries") c.dim = c.timeseries.u0.size();
  if (c.experiment == "cnf-csv" && c.csv_path.empty())
    fail("data.csv_path", "missing required field for cnf-csv");

  // Defaults that depend on other fields: the continuous-adjoint engine
  // trains on the adaptive solver, fixed-step defaults track the horizon.
  if (c.engine == Engine::OptDisc && !find(doc, "solver")) {
    c.solver = {Method::Dopri5, 0.0};
  } else if (!find(doc, "solver") || !find(*find(doc, "solver"), "h")) {
    if (c.experiment == "timeseries")
      c.solver.h = c.T / static_cast<double>(c.timeseries.n_points - 1);
    else
      c.solver.h = c.T / 10.0;
  }
  if (const json* s = find(doc, "solver"))
    c.solver = parse_solver(*s, "solver", c.solver);
  if (const json* s = find(doc, "backward"))
    c.backward = parse_solver(*s, "backward", c.backward);

  if (const json* ml = find(doc, "multilevel")) {
    if (!ml->is_array() || ml->empty())
      fail("multilevel", "expected a non-empty array of phases");
    for (std::size_t i = 0; i < ml->size(); ++i) {
      const std::string ctx = "multilevel[" + std::to_string(i) + "]";
      const json& p = (*ml)[i];
      if (!p.is_object()) fail(ctx, "expected an object");
      check_keys(p, ctx + ".", {"iterations", "lr", "solver"});
      TrainPhase phase;
      phase.iterations = get_int(p, "iterations", -1, ctx + ".");
      if (phase.iterations < 1) fail(ctx + ".iterations", "must be positive");
      phase.lr = get_num(p, "lr", c.lr, ctx + ".");
      if (!(phase.lr > 0.0)) fail(ctx + ".lr", "must be positive");
      const json* s = find(p, "solver");
      if (!s) fail(ctx + ".solver", "missing required field");
      phase.solver = parse_solver(*s, ctx + ".solver", c.solver);
      validate_engine_solver(c, phase.solver, ctx + ".solver");
      c.multilevel.push_back(phase);
    }
  }

  validate_engine_solver(c, c.solver, "solver");
  if (c.experiment != "timeseries" && c.trace == TraceMode::None)
    fail("trace", "density estimation needs a divergence estimate");

  c.raw = doc;
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return parse_experiment_config(doc);
}

DynamicsLayer make_layer(const ExperimentConfig& cfg) {
  if (cfg.kind == "linear") return DynamicsLayer::linear(cfg.dim);
  if (cfg.kind == "cubic-mlp")
    return DynamicsLayer::cubic_mlp(cfg.dim, cfg.hidden);
  return DynamicsLayer::concatsquash(cfg.dim, cfg.hidden, cfg.hidden_layers,
                                     cfg.flow_steps, cfg.gate);
}

ControlGrid make_grid(const ExperimentConfig& cfg) {
  ControlGrid grid = make_control_grid(make_layer(cfg), cfg.T, cfg.control_points);
  glorot_init(grid, cfg.seed);
  return grid;
}

TrainConfig make_train_config(const ExperimentConfig& cfg) {
  TrainConfig tc;
  tc.engine = cfg.engine;
  if (!cfg.multilevel.empty()) {
    tc.phases = cfg.multilevel;
  } else {
    tc.phases.push_back({cfg.iterations, cfg.solver, cfg.lr});
  }
  tc.adam = cfg.adam;
  tc.use_sgd = cfg.use_sgd;
  tc.trace = cfg.trace;
  tc.backward = cfg.backward;
  tc.use_stored_trajectory = cfg.use_stored_trajectory;
  tc.seed = cfg.seed;
  return tc;
}

namespace {

// Distinct sub-stream tags so batches, test data and probe noise never
// collide even though everything derives from one experiment seed.
constexpr std::uint64_t kBatchStream = 0x42000000;
constexpr std::uint64_t kTestStream = 2;
constexpr std::uint64_t kInverseStream = 3;

}  // namespace

Problem make_problem(const ExperimentConfig& cfg) {
  Problem p;
  if (cfg.experiment == "timeseries") {
    const TimeSeriesData data = generate_timeseries(cfg.timeseries);
    p.objective = Objective::regression(data.values, data.dt, cfg.alpha);
    const Mat y0 = cfg.timeseries.u0;
    p.sampler = [y0](long) { return y0; };
    return p;
  }

  p.objective = Objective::cnf(cfg.alpha);
  if (cfg.experiment == "cnf-mixture") {
    const MixtureConfig mix = cfg.mixture;
    const std::uint64_t seed = cfg.seed;
    const Index batch = cfg.batch;
    p.sampler = [mix, seed, batch](long iteration) {
      Rng rng(derive_seed(seed, kBatchStream + static_cast<std::uint64_t>(iteration)));
      return sample_mixture(mix, batch, rng);
    };
    Rng test_rng(derive_seed(seed, kTestStream));
    p.test_batch = sample_mixture(mix, cfg.test_samples, test_rng);
    Rng inv_rng(derive_seed(seed, kInverseStream));
    p.inverse_batch = sample_mixture(mix, cfg.inverse_samples, inv_rng);
    return p;
  }

  // cnf-csv: minibatches drawn with replacement from the standardized table
  const CsvData data = load_csv(cfg.csv_path);
  const Mat samples = data.samples;
  const std::uint64_t seed = cfg.seed;
  const Index batch = cfg.batch;
  p.sampler = [samples, seed, batch](long iteration) {
    Rng rng(derive_seed(seed, kBatchStream + static_cast<std::uint64_t>(iteration)));
    Mat out(samples.rows(), batch);
    for (Index b = 0; b < batch; ++b)
      out.col(b) = samples.col(static_cast<Index>(
          rng.next_u64() % static_cast<std::uint64_t>(samples.cols())));
    return out;
  };
  p.test_batch = samples.leftCols(std::min(cfg.test_samples, samples.cols()));
  p.inverse_batch = samples.leftCols(std::min(cfg.inverse_samples, samples.cols()));
  return p;
}

Experiment make_experiment(const ExperimentConfig& cfg) {
  Experiment e;
  e.cfg = cfg;
  if (cfg.experiment == "cnf-csv") {
    // the feature count comes from the file, not the config
    const CsvData data = load_csv(cfg.csv_path);
    e.cfg.dim = data.samples.rows();
  }
  e.grid = make_grid(e.cfg);
  e.problem = make_problem(e.cfg);
  e.train = make_train_config(e.cfg);
  return e;
}

}  // namespace odeflow
