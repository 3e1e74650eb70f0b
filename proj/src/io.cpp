#include "odeflow/io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "odeflow/config.hpp"

namespace odeflow {

using nlohmann::json;

namespace {

// Shortest decimal that round-trips the double.
std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == x) {
    for (int prec = 1; prec < 17; ++prec) {
      char shorter[32];
      std::snprintf(shorter, sizeof shorter, "%.*g", prec, x);
      std::sscanf(shorter, "%lf", &back);
      if (back == x) return shorter;
    }
  }
  return buf;
}

std::string config_comment(const json& echo) {
  if (echo.is_null()) return "";
  return "# config " + echo.dump() + "\n";
}

}  // namespace

void write_text_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write file: " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw ConfigError("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::string& path, const ControlGrid& grid,
                     const json& config_echo) {
  const DynamicsLayer& layer = grid.layer;
  json doc;
  doc["format"] = "odeflow-checkpoint";
  doc["version"] = 1;
  doc["layer"] = {{"kind", layer.kind_string()},
                  {"dim", layer.dim()},
                  {"hidden", layer.hidden()},
                  {"hidden_layers", layer.hidden_layers()},
                  {"flow_steps", layer.flow_steps()},
                  {"gate", to_string(layer.gate())}};
  doc["T"] = grid.T;
  doc["control_times"] = grid.times;
  json params = json::array();
  for (const Vec& p : grid.params)
    params.push_back(std::vector<double>(p.data(), p.data() + p.size()));
  doc["params"] = std::move(params);
  doc["config"] = config_echo;
  write_text_atomic(path, doc.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint: " + path + ": " + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "odeflow-checkpoint")
      throw ConfigError("checkpoint: unrecognized format field");

    const json& lj = doc.at("layer");
    const std::string kind = lj.at("kind").get<std::string>();
    const Index dim = lj.at("dim").get<Index>();
    DynamicsLayer layer = DynamicsLayer::linear(std::max<Index>(dim, 1));
    if (kind == "linear") {
      layer = DynamicsLayer::linear(dim);
    } else if (kind == "cubic-mlp") {
      layer = DynamicsLayer::cubic_mlp(dim, lj.at("hidden").get<Index>());
    } else if (kind == "concatsquash") {
      layer = DynamicsLayer::concatsquash(
          dim, lj.at("hidden").get<Index>(), lj.at("hidden_layers").get<int>(),
          lj.at("flow_steps").get<int>(),
          gate_from_string(lj.at("gate").get<std::string>()));
    } else {
      throw ConfigError("checkpoint: unknown layer kind '" + kind + "'");
    }

    Checkpoint cp;
    cp.grid.layer = layer;
    cp.grid.T = doc.at("T").get<double>();
    cp.grid.times = doc.at("control_times").get<std::vector<double>>();
    for (const json& pj : doc.at("params")) {
      const auto vals = pj.get<std::vector<double>>();
      if (static_cast<Index>(vals.size()) != layer.param_count())
        throw ConfigError("checkpoint: parameter vector size mismatch");
      Vec p(layer.param_count());
      for (Index i = 0; i < p.size(); ++i) p[i] = vals[static_cast<std::size_t>(i)];
      cp.grid.params.push_back(std::move(p));
    }
    if (cp.grid.params.size() != cp.grid.times.size())
      throw ConfigError("checkpoint: control times and parameters disagree");
    cp.config = doc.value("config", json());
    return cp;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint: " + path + ": " + e.what());
  }
}

json solver_json(const SolverConfig& cfg) {
  json j;
  j["method"] = to_string(cfg.method);
  if (cfg.method == Method::Dopri5) {
    j["rtol"] = cfg.rtol;
    j["atol"] = cfg.atol;
  } else {
    j["h"] = cfg.h;
  }
  return j;
}

void write_convergence_csv(const std::string& path, const ConvergenceLog& log,
                           const json& config_echo) {
  std::ostringstream out;
  out << config_comment(config_echo);
  out << "iteration,loss,nfe,wall_ms,phase\n";
  for (const IterationStat& r : log.rows)
    out << r.iteration << ',' << num(r.loss) << ',' << r.cum_nfe << ','
        << num(r.wall_ms) << ',' << r.phase << '\n';
  write_text_atomic(path, out.str());
}

void write_trajectory_csv(const std::string& path, const SolveRecord& rec,
                          Index sample, const json& config_echo) {
  require(!rec.states.empty(), "write_trajectory_csv: empty record");
  require(sample >= 0 && sample < rec.batch(),
          "write_trajectory_csv: sample out of range");
  const Index rows = rec.states[0].rows();
  const Index n = rec.has_g ? rows - 1 : rows;

  std::ostringstream out;
  out << config_comment(config_echo);
  out << 't';
  for (Index i = 0; i < n; ++i) out << ",y" << i;
  if (rec.has_g) out << ",g";
  out << '\n';
  for (std::size_t k = 0; k < rec.times.size(); ++k) {
    out << num(rec.times[k]);
    for (Index i = 0; i < rows; ++i) out << ',' << num(rec.states[k](i, sample));
    out << '\n';
  }
  write_text_atomic(path, out.str());
}

json taylor_json(const TaylorCheck& tc) {
  json j;
  j["h"] = tc.hs;
  j["e0"] = tc.e0;
  j["e1"] = tc.e1;
  j["slope_e0"] = tc.slope0;
  j["slope_e1"] = tc.slope1;
  j["f0"] = tc.f0;
  j["directional_derivative"] = tc.dirderiv;
  return j;
}

void write_taylor_csv(
    const std::string& path,
    const std::vector<std::pair<std::string, TaylorCheck>>& checks,
    const json& config_echo) {
  std::ostringstream out;
  out << config_comment(config_echo);
  out << "label,h,e0,e1\n";
  for (const auto& [label, tc] : checks)
    for (std::size_t i = 0; i < tc.hs.size(); ++i)
      out << label << ',' << num(tc.hs[i]) << ',' << num(tc.e0[i]) << ','
          << num(tc.e1[i]) << '\n';
  write_text_atomic(path, out.str());
}

json redisc_json(const std::vector<RediscRow>& rows) {
  json arr = json::array();
  for (const RediscRow& r : rows) {
    json j;
    j["solver"] = solver_json(r.solver);
    j["loss"] = r.loss;
    j["inverse_error"] = r.inverse_err;
    j["nfe"] = r.nfe;
    j["is_training_config"] = r.is_training_config;
    arr.push_back(std::move(j));
  }
  return arr;
}

void write_redisc_csv(const std::string& path,
                      const std::vector<RediscRow>& rows,
                      const json& config_echo) {
  std::ostringstream out;
  out << config_comment(config_echo);
  out << "method,h,rtol,atol,loss,inverse_error,nfe,is_training_config\n";
  for (const RediscRow& r : rows) {
    const bool adaptive = r.solver.method == Method::Dopri5;
    out << to_string(r.solver.method) << ',' << (adaptive ? "" : num(r.solver.h))
        << ',' << (adaptive ? num(r.solver.rtol) : "") << ','
        << (adaptive ? num(r.solver.atol) : "") << ',' << num(r.loss) << ','
        << num(r.inverse_err) << ',' << r.nfe << ','
        << (r.is_training_config ? 1 : 0) << '\n';
  }
  write_text_atomic(path, out.str());
}

}  // namespace odeflow
