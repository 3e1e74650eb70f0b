#pragma once

#include <optional>
#include <string>
#include <vector>

#include "odeflow/types.hpp"

namespace odeflow {

// Pointwise gate nonlinearity used by the gated time-affine layer.
enum class Gate { Tanh, Sigmoid };

std::string to_string(Gate g);
Gate gate_from_string(const std::string& s);

// How the divergence (Jacobian trace) of the field is evaluated.
//   Exact:      sum of e_i^T (d l / d y) e_i over the n_f basis vectors.
//   Hutchinson: eps^T (d l / d y) eps for a caller-supplied probe eps.
enum class TraceMode { None, Exact, Hutchinson };

// Architecture descriptor for the velocity field l(theta, y, t).
//
// Three kinds are supported:
//   Linear:       l = A y + b                      theta = [vec(A), b]
//   CubicMlp:     l = W2 tanh(W1 y^3 + b1) + b2    theta = [vec(W1), b1, vec(W2), b2]
//   ConcatSquash: a stack of gated time-affine layers
//                   c(y) = (W2 y + b2) .* gate(w1 t + b1) + w0 t
//                 with a pointwise tanh between consecutive layers
//                 (none after the last), repeated `flow_steps` times.
//                 theta = per layer [vec(W2), b2, w1, b1, w0], layers in order.
//
// All matrices are stored column-major inside the flat parameter vector.
// The class is a value type holding only shape information; parameters
// always travel separately as flat vectors so control grids can own them.
class DynamicsLayer {
 public:
  enum class Kind { Linear, CubicMlp, ConcatSquash };

  DynamicsLayer() = default;  // empty placeholder; use the factories

  static DynamicsLayer linear(Index dim);
  static DynamicsLayer cubic_mlp(Index dim, Index hidden);
  static DynamicsLayer concatsquash(Index dim, Index hidden, int hidden_layers,
                                    int flow_steps = 1, Gate gate = Gate::Tanh);

  Kind kind() const { return kind_; }
  Index dim() const { return dim_; }
  Index hidden() const { return hidden_; }
  int hidden_layers() const { return hidden_layers_; }
  int flow_steps() const { return flow_steps_; }
  Gate gate() const { return gate_; }
  Index param_count() const { return param_count_; }

  // (in, out, offset-of-W2) for every affine map inside the layer, in the
  // order their parameters appear in the flat vector.  Used by init code.
  struct AffineBlock {
    Index in, out, offset;
    bool time_map;  // maps a scalar time, fan-in 1
  };
  std::vector<AffineBlock> affine_blocks() const;

  std::string kind_string() const;

 private:
  Kind kind_ = Kind::Linear;
  Index dim_ = 0;
  Index hidden_ = 0;
  int hidden_layers_ = 0;
  int flow_steps_ = 1;
  Gate gate_ = Gate::Tanh;
  Index param_count_ = 0;
};

// ---------------------------------------------------------------------------
// Field evaluation and hand-derived derivative contractions.
//
// Batched variants treat each column of Y as an independent sample sharing
// theta and t.  Tangent/probe blocks are laid out as k horizontal blocks of
// batch width: columns [j*B, (j+1)*B) hold tangent j for every sample.
// ---------------------------------------------------------------------------

// Velocity l(theta, y, t).
Vec forward(const DynamicsLayer& layer, const Vec& theta, const Vec& y, double t);
Mat forward(const DynamicsLayer& layer, const Vec& theta, const Mat& Y, double t);

// Jacobian-vector product (d l / d y) u at fixed (theta, t).
Vec jvp_state(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
              double t, const Vec& u);
Mat jvp_state(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
              double t, const Mat& U);

// Vector-Jacobian product (d l / d y)^T z.
Vec vjp_state(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
              double t, const Vec& z);
Mat vjp_state(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
              double t, const Mat& Z);

// Parameter cotangent (d l / d theta)^T z; the batched form returns the sum
// over samples (cotangent columns carry any per-sample weights already).
Vec vjp_params(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
               double t, const Vec& z);
Vec vjp_params(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
               double t, const Mat& Z);

// Divergence of the field: trace of d l / d y.  Exact evaluation contracts
// the Jacobian against all n_f basis vectors and is guarded for small n_f.
double exact_trace(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
                   double t);
Vec exact_trace(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
                double t);

// Stochastic divergence estimate eps^T (d l / d y) eps.  Unbiased when eps
// has zero mean and unit covariance; eps is supplied so callers control the
// noise stream (fixed across one solve, resampled per batch).
double hutchinson_trace(const DynamicsLayer& layer, const Vec& theta,
                        const Vec& y, double t, const Vec& eps);
Vec hutchinson_trace(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
                     double t, const Mat& Eps);

// ---------------------------------------------------------------------------
// Fused stage kernels for the solvers and gradient engines.  One forward
// recomputation is shared between the velocity, the divergence and all
// reverse-mode contractions at a given (theta, Y, t).
// ---------------------------------------------------------------------------

// Velocity plus (optionally) the per-sample divergence in a single pass.
// `Eps` is required exactly when mode == Hutchinson.
Mat stage_eval(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
               double t, TraceMode mode, const Mat* Eps, Vec* trace_out);

// Reverse sweep at one stage.
//   Z          cotangent on the velocity output (n_f x B)
//   trace_cot  optional per-sample cotangent on the divergence output; its
//              pullback needs second-order terms, contracted here exactly
//              (mode selects the same estimator used forward)
//   theta_bar  parameter cotangent is accumulated (+=) into this vector
// Returns the cotangent on the input state Y.
Mat stage_vjp(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
              double t, const Mat& Z, const Vec* trace_cot, TraceMode mode,
              const Mat* Eps, Vec& theta_bar);

}  // namespace odeflow
