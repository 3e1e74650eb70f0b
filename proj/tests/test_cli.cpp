#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;
using nlohmann::json;

namespace {

// Path of the binary under test, injected by CMake.
std::string cli() {
  const char* p = std::getenv("ODEFLOW_CLI");
  REQUIRE(p != nullptr);
  return p;
}

// Runs the CLI with the given arguments, captures interleaved
// stdout/stderr, and returns the exit code.
int run(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = cli() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string text;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof(buf), pipe)) text.append(buf, n);
  const int status = pclose(pipe);
  if (output) *output = text;
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

// Fresh scratch directory per test case, removed up front so reruns
// never see stale artifacts.
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("odeflow_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const json& doc) {
  const fs::path path = dir / "config.json";
  std::ofstream(path) << doc.dump(2) << "\n";
  return path;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) { return json::parse(slurp(path)); }

// A trajectory-fitting run small enough to train in well under a second:
// four data points half a unit apart, two steps per gap.
json tiny_timeseries() {
  return json{{"experiment", "timeseries"},
              {"data", {{"n_points", 4}}},
              {"solver", {{"method", "rk4"}, {"h", 0.25}}},
              {"optimizer", {{"iterations", 5}}}};
}

// A density run with a small gated network and a handful of samples.
json tiny_cnf() {
  return json{{"experiment", "cnf-mixture"},
              {"network", {{"hidden", 8}, {"hidden_layers", 1}}},
              {"solver", {{"method", "rk4"}, {"h", 0.125}}},
              {"data", {{"test_samples", 32}, {"inverse_samples", 4}}},
              {"optimizer", {{"iterations", 3}, {"batch", 16}}}};
}

}  // namespace

TEST_CASE("argument errors exit with the config code", "[cli]") {
  std::string out;
  REQUIRE(run("", &out) == 2);  // a subcommand is required

  REQUIRE(run("--help", &out) == 0);
  REQUIRE_THAT(out, ContainsSubstring("train"));
  REQUIRE_THAT(out, ContainsSubstring("rediscretize"));

  REQUIRE(run("train", &out) == 2);  // --config is required
  REQUIRE_THAT(out, ContainsSubstring("--config"));

  REQUIRE(run("train --config x.json --frobnicate", &out) == 2);
  REQUIRE(run("frobnicate", &out) == 2);
}

TEST_CASE("config problems exit with code 2 and name the field", "[cli]") {
  const fs::path dir = scratch("badcfg");
  std::string out;

  REQUIRE(run("train --config " + (dir / "missing.json").string(), &out) == 2);
  REQUIRE_THAT(out, ContainsSubstring("config error"));

  auto doc = tiny_timeseries();
  doc["warp_factor"] = 9;
  const fs::path bad = write_config(dir, doc);
  REQUIRE(run("train --config " + bad.string(), &out) == 2);
  REQUIRE_THAT(out, ContainsSubstring("warp_factor"));
}

TEST_CASE("train writes the three artifacts", "[cli]") {
  const fs::path dir = scratch("train");
  const fs::path cfg = write_config(dir, tiny_timeseries());

  std::string out;
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string(),
              &out) == 0);
  REQUIRE_THAT(out, ContainsSubstring("final loss"));

  const json summary = read_json(dir / "summary.json");
  REQUIRE(summary["experiment"] == "timeseries");
  REQUIRE(summary["engine"] == "disc-opt");
  REQUIRE(summary["iterations"] == 5);
  REQUIRE(std::isfinite(summary["final_loss"].get<double>()));
  REQUIRE(summary["total_nfe"].get<long>() > 0);
  REQUIRE(summary["config"]["experiment"] == "timeseries");
  REQUIRE(summary["timing"].contains("total_wall_ms"));

  const json ckpt = read_json(dir / "checkpoint.json");
  REQUIRE(ckpt.contains("params"));
  REQUIRE(ckpt["config"]["experiment"] == "timeseries");

  // convergence log: config comment, header, one row per iteration
  std::istringstream csv(slurp(dir / "convergence.csv"));
  std::string line;
  std::getline(csv, line);
  REQUIRE_THAT(line, ContainsSubstring("# config"));
  std::getline(csv, line);
  REQUIRE(line == "iteration,loss,nfe,wall_ms,phase");
  int rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  REQUIRE(rows == 5);
}

TEST_CASE("training runs are reproducible and seedable", "[cli]") {
  const fs::path dir = scratch("repro");
  const fs::path cfg = write_config(dir, tiny_timeseries());
  const fs::path a = dir / "a", b = dir / "b", c = dir / "c";
  fs::create_directories(a);
  fs::create_directories(b);
  fs::create_directories(c);

  const std::string base = "train --config " + cfg.string() + " --out ";
  REQUIRE(run(base + a.string()) == 0);
  REQUIRE(run(base + b.string()) == 0);
  REQUIRE(run(base + c.string() + " --seed 7") == 0);

  // identical runs agree exactly, apart from wall-clock timings
  REQUIRE(slurp(a / "checkpoint.json") == slurp(b / "checkpoint.json"));
  json sa = read_json(a / "summary.json");
  json sb = read_json(b / "summary.json");
  sa.erase("timing");
  sb.erase("timing");
  REQUIRE(sa == sb);

  // the seed flag reaches the initializer and the artifact echo
  const json sc = read_json(c / "summary.json");
  REQUIRE(sc["seed"] == 7);
  REQUIRE(sc["config"]["seed"] == 7);
  REQUIRE(slurp(c / "checkpoint.json") != slurp(a / "checkpoint.json"));
}

TEST_CASE("gradcheck reports first and second order slopes", "[cli]") {
  const fs::path dir = scratch("gradcheck");
  const fs::path cfg = write_config(dir, tiny_timeseries());

  std::string out;
  REQUIRE(run("gradcheck --config " + cfg.string() + " --out " + dir.string(),
              &out) == 0);
  REQUIRE_THAT(out, ContainsSubstring("disc-opt"));
  REQUIRE_THAT(out, ContainsSubstring("opt-disc"));

  const json rep = read_json(dir / "gradcheck.json");
  // the recorded-sweep gradient is exact for the discrete objective, so its
  // linearization error is cleanly second order
  REQUIRE(rep["disc-opt"]["slope_e1"].get<double>() > 1.9);
  // the continuous adjoint differs from the discrete gradient by the solver
  // truncation at this coarse step, which floors E1 and drags the fitted
  // slope below two
  REQUIRE(rep["opt-disc"]["slope_e1"].get<double>() > 1.5);
  for (const char* engine : {"disc-opt", "opt-disc"})
    REQUIRE(rep[engine]["slope_e0"].get<double>() > 0.9);
  REQUIRE(fs::exists(dir / "gradcheck.csv"));
}

TEST_CASE("invcheck round-trips a density checkpoint", "[cli]") {
  const fs::path dir = scratch("invcheck");
  const fs::path cfg = write_config(dir, tiny_cnf());
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string()) == 0);
  const std::string ckpt = (dir / "checkpoint.json").string();

  // no --config: the experiment is rebuilt from the checkpoint echo
  std::string out;
  REQUIRE(run("invcheck --checkpoint " + ckpt + " --out " + dir.string(),
              &out) == 0);
  const json rep = read_json(dir / "invcheck.json");
  REQUIRE(rep["samples"] == 4);
  REQUIRE(rep["mean"].get<double>() >= 0.0);
  REQUIRE(rep["mean"].get<double>() < 1e-2);
  REQUIRE(rep["max"].get<double>() >= rep["mean"].get<double>());
  REQUIRE(rep["forward_nfe"].get<long>() > 0);

  // solver overrides are accepted and echoed
  REQUIRE(run("invcheck --checkpoint " + ckpt + " --out " + dir.string() +
              " --method dopri5") == 0);
  REQUIRE(read_json(dir / "invcheck.json")["solver"]["method"] == "dopri5");
  REQUIRE(run("invcheck --checkpoint " + ckpt + " --out " + dir.string() +
              " --method rk4 --step-size 0.1") == 0);
  REQUIRE(read_json(dir / "invcheck.json")["solver"]["h"] == 0.1);

  REQUIRE(run("invcheck --out " + dir.string(), &out) == 2);  // no checkpoint
}

TEST_CASE("invcheck rejects trajectory checkpoints", "[cli]") {
  const fs::path dir = scratch("invts");
  const fs::path cfg = write_config(dir, tiny_timeseries());
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string()) == 0);

  std::string out;
  REQUIRE(run("invcheck --checkpoint " + (dir / "checkpoint.json").string() +
              " --out " + dir.string(), &out) == 2);
  REQUIRE_THAT(out, ContainsSubstring("density"));
}

TEST_CASE("rediscretize sweeps solver settings", "[cli]") {
  const fs::path dir = scratch("redisc");
  const fs::path cfg = write_config(dir, tiny_cnf());
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string()) == 0);
  const std::string ckpt = (dir / "checkpoint.json").string();

  std::string out;
  REQUIRE(run("rediscretize --checkpoint " + ckpt + " --out " + dir.string() +
              " --step-size 0.25 0.125", &out) == 0);
  const json rows = read_json(dir / "rediscretize.json")["rows"];
  REQUIRE(rows.size() == 2);
  REQUIRE(rows[0]["solver"]["h"] == 0.25);
  REQUIRE_FALSE(rows[0]["is_training_config"].get<bool>());
  REQUIRE(rows[1]["is_training_config"].get<bool>());  // matches training h
  for (const auto& r : rows) {
    REQUIRE(std::isfinite(r["loss"].get<double>()));
    REQUIRE(r["nfe"].get<long>() > 0);
  }
  REQUIRE(fs::exists(dir / "rediscretize.csv"));

  // steps that do not tile the horizon are rejected up front
  REQUIRE(run("rediscretize --checkpoint " + ckpt + " --out " + dir.string() +
              " --step-size 0.3", &out) == 2);
}

TEST_CASE("compare trains both engines from one seed", "[cli]") {
  const fs::path dir = scratch("compare");
  const fs::path cfg = write_config(dir, tiny_timeseries());

  std::string out;
  REQUIRE(run("compare --config " + cfg.string() + " --out " + dir.string(),
              &out) == 0);
  const json runs = read_json(dir / "comparison.json")["runs"];
  REQUIRE(runs.size() == 2);
  REQUIRE(runs[0]["engine"] == "disc-opt");
  REQUIRE(runs[1]["engine"] == "opt-disc");
  for (const auto& r : runs) {
    REQUIRE(std::isfinite(r["final_loss"].get<double>()));
    REQUIRE(r["total_nfe"].get<long>() > 0);
  }
  REQUIRE(fs::exists(dir / "convergence_disc-opt.csv"));
  REQUIRE(fs::exists(dir / "convergence_opt-disc.csv"));
}

TEST_CASE("runaway optimization exits with the numerical code", "[cli]") {
  const fs::path dir = scratch("diverge");
  auto doc = tiny_timeseries();
  doc["optimizer"]["method"] = "sgd";
  doc["optimizer"]["lr"] = 1e300;  // one update overflows the parameters
  const fs::path cfg = write_config(dir, doc);

  std::string out;
  REQUIRE(run("train --config " + cfg.string() + " --out " + dir.string(),
              &out) == 3);
  REQUIRE_THAT(out, ContainsSubstring("numerical failure"));
}
