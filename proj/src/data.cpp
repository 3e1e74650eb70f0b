#include "odeflow/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "odeflow/integrate.hpp"

namespace odeflow {

TimeSeriesData generate_timeseries(const TimeSeriesConfig& cfg) {
  require(cfg.n_points >= 2, "time series needs at least two points");
  require(cfg.T > 0.0, "time series needs a positive horizon");
  require(cfg.A.rows() == cfg.A.cols() && cfg.A.rows() == cfg.u0.size(),
          "system matrix and initial state disagree");

  const Field f = [&cfg](double, const Mat& U) {
    return (cfg.A * U.array().cube().matrix()).eval();
  };
  SolverConfig sc;
  sc.method = Method::Dopri5;
  sc.rtol = cfg.rtol;
  sc.atol = cfg.atol;
  const SolveRecord rec = integrate_field(f, Mat(cfg.u0), cfg.T, sc);

  TimeSeriesData out;
  out.dt = cfg.T / static_cast<double>(cfg.n_points - 1);
  out.times = Vec(cfg.n_points);
  out.values = Mat(cfg.u0.size(), cfg.n_points);
  for (Index k = 0; k < cfg.n_points; ++k) {
    const double tk = std::min(out.dt * static_cast<double>(k), cfg.T);
    out.times[k] = tk;
    out.values.col(k) = rec.state_at(tk);
  }
  return out;
}

namespace {

Mat mixture_centers(const MixtureConfig& cfg) {
  Mat c(2, cfg.modes);
  for (int k = 0; k < cfg.modes; ++k) {
    const double phi = 2.0 * M_PI * static_cast<double>(k) /
                       static_cast<double>(cfg.modes);
    c.col(k) << cfg.radius * std::cos(phi), cfg.radius * std::sin(phi);
  }
  return c;
}

}  // namespace

Mat sample_mixture(const MixtureConfig& cfg, Index n, Rng& rng) {
  require(cfg.modes >= 1 && cfg.sigma > 0.0, "invalid mixture");
  const Mat centers = mixture_centers(cfg);
  Mat X(2, n);
  for (Index i = 0; i < n; ++i) {
    const int k = static_cast<int>(rng.next_u64() % cfg.modes);
    X(0, i) = centers(0, k) + cfg.sigma * rng.normal();
    X(1, i) = centers(1, k) + cfg.sigma * rng.normal();
  }
  return X;
}

double mixture_log_density(const MixtureConfig& cfg, const Vec& x) {
  require(x.size() == 2, "mixture lives in the plane");
  const Mat centers = mixture_centers(cfg);
  const double s2 = cfg.sigma * cfg.sigma;
  double m = -std::numeric_limits<double>::infinity();
  Vec expo(cfg.modes);
  for (int k = 0; k < cfg.modes; ++k) {
    expo[k] = -0.5 * (x - centers.col(k)).squaredNorm() / s2;
    m = std::max(m, expo[k]);
  }
  double acc = 0.0;
  for (int k = 0; k < cfg.modes; ++k) acc += std::exp(expo[k] - m);
  return m + std::log(acc) - std::log(2.0 * M_PI * s2) -
         std::log(static_cast<double>(cfg.modes));
}

double mixture_entropy_mc(const MixtureConfig& cfg, Index n, Rng& rng) {
  const Mat X = sample_mixture(cfg, n, rng);
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) acc -= mixture_log_density(cfg, X.col(i));
  return acc / static_cast<double>(n);
}

CsvData load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open csv file: " + path);

  std::vector<std::vector<double>> rows;
  std::string line;
  Index width = -1;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        size_t used = 0;
        const double v = std::stod(cell, &used);
        while (used < cell.size() &&
               std::isspace(static_cast<unsigned char>(cell[used])))
          ++used;
        if (used != cell.size()) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty() && width < 0) continue;  // header row
      throw ConfigError("non-numeric value in " + path + " line " +
                        std::to_string(lineno));
    }
    if (width < 0) width = static_cast<Index>(row.size());
    if (static_cast<Index>(row.size()) != width)
      throw ConfigError("ragged csv row in " + path + " line " +
                        std::to_string(lineno) + ": got " +
                        std::to_string(row.size()) + " fields, expected " +
                        std::to_string(width));
    rows.push_back(std::move(row));
  }
  if (rows.empty() || width <= 0)
    throw ConfigError("csv file has no numeric data: " + path);

  const Index N = static_cast<Index>(rows.size());
  CsvData out;
  out.samples = Mat(width, N);
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < width; ++j) out.samples(j, i) = rows[i][j];

  out.mean = out.samples.rowwise().mean();
  out.samples.colwise() -= out.mean;
  out.stddev = (out.samples.array().square().rowwise().sum() /
                static_cast<double>(N))
                   .sqrt()
                   .matrix();
  for (Index j = 0; j < width; ++j) {
    if (out.stddev[j] <= 0.0)
      throw ConfigError("csv feature " + std::to_string(j) +
                        " has zero variance, cannot standardize");
    out.samples.row(j) /= out.stddev[j];
  }
  return out;
}

}  // namespace odeflow
