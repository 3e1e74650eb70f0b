#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace odeflow {

// All numerics run in 64-bit floating point on dense Eigen types.
// States are column vectors; batches put one sample per column.
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// A caller broke a documented precondition (shape mismatch, bad range, ...).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// User-supplied configuration is invalid or inconsistent.  The CLI maps
// this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A solve or optimization produced non-finite values or failed to make
// progress.  The CLI maps this to exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

}  // namespace odeflow
