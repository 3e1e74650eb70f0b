#include "odeflow/dynamics.hpp"

#include <cmath>

namespace odeflow {
namespace {

// ---------------------------------------------------------------------------
// Shared layout helpers.
//
// Derivative sweeps run on concatenated matrices [state | tangent blocks]:
// the state occupies columns [0, B) and tangent block j occupies columns
// [(1+j)B, (2+j)B).  Elementwise sample data (activation derivatives etc.,
// shape n x B) applies to every block; affine maps act on the whole
// concatenation with a single product.  This folds the velocity, the
// divergence tangents and all cotangents into a handful of wide GEMMs.
// ---------------------------------------------------------------------------

using MapM = Eigen::Map<const Mat>;
using MapV = Eigen::Map<const Vec>;
using MutM = Eigen::Map<Mat>;
using MutV = Eigen::Map<Vec>;

void gate_values(Gate g, const Vec& a, Vec& gamma, Vec& dgamma) {
  switch (g) {
    case Gate::Tanh:
      gamma = a.array().tanh().matrix();
      dgamma = (1.0 - gamma.array().square()).matrix();
      break;
    case Gate::Sigmoid:
      gamma = (0.5 * (1.0 + (0.5 * a.array()).tanh())).matrix();
      dgamma = (gamma.array() * (1.0 - gamma.array())).matrix();
      break;
  }
}

// Multiply every width-B block of M elementwise with the sample array A.
void scale_blocks(Eigen::Ref<Mat> M, const Mat& A, Index B) {
  const Index k = M.cols() / B;
  for (Index j = 0; j < k; ++j)
    M.middleCols(j * B, B).array() *= A.array();
}

// Descriptor of one gated time-affine layer inside a stack.
struct CsDesc {
  Index in, out;
  Index w2, b2, w1, b1, w0;  // offsets into the flat parameter vector
};

std::vector<CsDesc> cs_layout(const DynamicsLayer& layer) {
  std::vector<CsDesc> ds;
  Index off = 0;
  for (int r = 0; r < layer.flow_steps(); ++r) {
    const int L = layer.hidden_layers() + 1;
    for (int i = 0; i < L; ++i) {
      CsDesc d;
      d.in = (i == 0) ? layer.dim() : layer.hidden();
      d.out = (i == L - 1) ? layer.dim() : layer.hidden();
      d.w2 = off;
      d.b2 = d.w2 + d.in * d.out;
      d.w1 = d.b2 + d.out;
      d.b1 = d.w1 + d.out;
      d.w0 = d.b1 + d.out;
      off = d.w0 + d.out;
      ds.push_back(d);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Fused pass.  `pass_forward` evaluates the velocity together with any
// tangent blocks and stores what the reverse sweep reuses.
// ---------------------------------------------------------------------------

struct PassWork {
  Index B = 0, k = 0;      // batch width, number of tangent blocks
  std::vector<Mat> XU;     // inputs to the affine stages [state | tangents]
  std::vector<Mat> PQ;     // pre-gate / pre-activation values per stage
  std::vector<Vec> gamma, dgamma;
  Mat out;                 // [velocity | tangent outputs]
};

void pass_forward(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
                  double t, const Mat& U, PassWork& w, bool keep) {
  const Index B = Y.cols();
  w.B = B;
  w.k = (B > 0) ? U.cols() / B : 0;

  Mat cur(layer.dim(), B + U.cols());
  cur.leftCols(B) = Y;
  if (U.cols() > 0) cur.rightCols(U.cols()) = U;

  switch (layer.kind()) {
    case DynamicsLayer::Kind::Linear: {
      const Index n = layer.dim();
      MapM A(theta.data(), n, n);
      MapV b(theta.data() + n * n, n);
      if (keep) w.XU.push_back(cur);
      w.out.noalias() = A * cur;
      w.out.leftCols(B).colwise() += b;
      return;
    }

    case DynamicsLayer::Kind::CubicMlp: {
      const Index n = layer.dim();
      const Index m = layer.hidden();
      MapM W1(theta.data(), m, n);
      MapV b1(theta.data() + m * n, m);
      MapM W2(theta.data() + m * n + m, n, m);
      MapV b2(theta.data() + m * n + m + n * m, n);

      if (keep) w.XU.push_back(cur);  // original [Y | U]
      Mat cu = cur;
      cu.leftCols(B) = Y.array().cube().matrix();
      if (w.k > 0) {
        const Mat ysq3 = (3.0 * Y.array().square()).matrix();
        scale_blocks(cu.rightCols(U.cols()), ysq3, B);
      }
      if (keep) w.XU.push_back(cu);

      Mat pq(m, cu.cols());
      pq.noalias() = W1 * cu;
      pq.leftCols(B).colwise() += b1;
      if (keep) w.PQ.push_back(pq);

      Mat su = std::move(pq);
      su.leftCols(B) = su.leftCols(B).array().tanh().matrix();
      if (w.k > 0) {
        const Mat d = (1.0 - su.leftCols(B).array().square()).matrix();
        scale_blocks(su.rightCols(U.cols()), d, B);
      }
      if (keep) w.XU.push_back(su);

      w.out.noalias() = W2 * su;
      w.out.leftCols(B).colwise() += b2;
      return;
    }

    case DynamicsLayer::Kind::ConcatSquash: {
      const auto ds = cs_layout(layer);
      const Index L = static_cast<Index>(ds.size());
      for (Index i = 0; i < L; ++i) {
        const CsDesc& d = ds[i];
        MapM W2(theta.data() + d.w2, d.out, d.in);
        MapV b2(theta.data() + d.b2, d.out);
        MapV w1(theta.data() + d.w1, d.out);
        MapV b1(theta.data() + d.b1, d.out);
        MapV w0(theta.data() + d.w0, d.out);

        Vec gamma, dgamma;
        gate_values(layer.gate(), (w1 * t + b1).eval(), gamma, dgamma);

        if (keep) w.XU.push_back(cur);
        Mat pq(d.out, cur.cols());
        pq.noalias() = W2 * cur;
        pq.leftCols(B).colwise() += b2;

        Mat o = pq;
        scale_blocks(o, gamma.replicate(1, B), B);
        o.leftCols(B).colwise() += (w0 * t).eval();
        if (keep) {
          w.PQ.push_back(std::move(pq));
          w.gamma.push_back(std::move(gamma));
          w.dgamma.push_back(std::move(dgamma));
        }

        if (i + 1 < L) {  // pointwise tanh between consecutive layers
          o.leftCols(B) = o.leftCols(B).array().tanh().matrix();
          if (w.k > 0) {
            const Mat dd = (1.0 - o.leftCols(B).array().square()).matrix();
            scale_blocks(o.rightCols(w.k * B), dd, B);
          }
          cur = std::move(o);
        } else {
          w.out = std::move(o);
        }
      }
      return;
    }
  }
  throw ContractError("unknown dynamics kind");
}

// Reverse sweep over a stored pass.  ZM holds [state cotangent | tangent
// cotangents]; pulling a divergence cotangent back through the tangent
// blocks contributes the exact second-order (curvature) terms.  Parameter
// cotangents accumulate into theta_bar; returns the input-state cotangent.
Mat pass_reverse(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
                 double t, const PassWork& w, Mat ZM, bool want_state,
                 bool want_params, Vec* theta_bar) {
  const Index B = w.B;

  switch (layer.kind()) {
    case DynamicsLayer::Kind::Linear: {
      const Index n = layer.dim();
      MapM A(theta.data(), n, n);
      if (want_params) {
        MutM Abar(theta_bar->data(), n, n);
        Abar.noalias() += ZM * w.XU[0].transpose();
        MutV bbar(theta_bar->data() + n * n, n);
        bbar += ZM.leftCols(B).rowwise().sum();
      }
      if (!want_state) return Mat();
      Mat zin;
      zin.noalias() = A.transpose() * ZM.leftCols(B);
      return zin;
    }

    case DynamicsLayer::Kind::CubicMlp: {
      const Index n = layer.dim();
      const Index m = layer.hidden();
      MapM W1(theta.data(), m, n);
      MapM W2(theta.data() + m * n + m, n, m);

      if (want_params) {
        MutM W2bar(theta_bar->data() + m * n + m, n, m);
        W2bar.noalias() += ZM * w.XU[2].transpose();
        MutV b2bar(theta_bar->data() + m * n + m + n * m, n);
        b2bar += ZM.leftCols(B).rowwise().sum();
      }
      Mat zm;
      zm.noalias() = W2.transpose() * ZM;

      // tanh: scale all cotangents, then add the curvature cross-terms
      // -2 s (1-s^2) .* u .* mu onto the state cotangent.
      const Mat s = w.XU[2].leftCols(B);
      const Mat dd = (1.0 - s.array().square()).matrix();
      scale_blocks(zm, dd, B);
      for (Index j = 0; j < w.k; ++j)
        zm.leftCols(B).array() += -2.0 * s.array() *
                                  w.PQ[0].middleCols((1 + j) * B, B).array() *
                                  zm.middleCols((1 + j) * B, B).array();

      if (want_params) {
        MutM W1bar(theta_bar->data(), m, n);
        W1bar.noalias() += zm * w.XU[1].transpose();
        MutV b1bar(theta_bar->data() + m * n, m);
        b1bar += zm.leftCols(B).rowwise().sum();
      }
      if (!want_state) return Mat();
      Mat zc;
      zc.noalias() = W1.transpose() * zm;

      // cube: 3 y^2 on the state path plus 6 y .* u .* mu cross-terms.
      Mat zin = (3.0 * Y.array().square() * zc.leftCols(B).array()).matrix();
      for (Index j = 0; j < w.k; ++j)
        zin.array() += 6.0 * Y.array() *
                       w.XU[0].middleCols((1 + j) * B, B).array() *
                       zc.middleCols((1 + j) * B, B).array();
      return zin;
    }

    case DynamicsLayer::Kind::ConcatSquash: {
      const auto ds = cs_layout(layer);
      const Index L = static_cast<Index>(ds.size());
      for (Index i = L - 1; i >= 0; --i) {
        const CsDesc& d = ds[i];
        MapM W2(theta.data() + d.w2, d.out, d.in);

        if (i + 1 < L) {
          // undo the interleaved tanh: scale by 1-s^2, then add the
          // curvature cross-terms; the tangent that entered this tanh was
          // gamma_i .* Q_i (gate-scaled tangent output of layer i).
          const Mat s = w.XU[i + 1].leftCols(B);
          const Mat dd = (1.0 - s.array().square()).matrix();
          scale_blocks(ZM, dd, B);
          for (Index j = 0; j < w.k; ++j)
            ZM.leftCols(B).array() +=
                -2.0 * s.array() *
                (w.PQ[i].middleCols((1 + j) * B, B).array().colwise() *
                 w.gamma[i].array()) *
                ZM.middleCols((1 + j) * B, B).array();
        }

        if (want_params) {
          // gate pullback collects the state and tangent channels alike
          Vec abar = (ZM.leftCols(B).array() * w.PQ[i].leftCols(B).array())
                         .rowwise().sum().matrix();
          for (Index j = 0; j < w.k; ++j)
            abar.array() += (ZM.middleCols((1 + j) * B, B).array() *
                             w.PQ[i].middleCols((1 + j) * B, B).array())
                                .rowwise().sum();
          abar.array() *= w.dgamma[i].array();
          MutV(theta_bar->data() + d.w1, d.out) += abar * t;
          MutV(theta_bar->data() + d.b1, d.out) += abar;
          MutV(theta_bar->data() + d.w0, d.out) +=
              t * ZM.leftCols(B).rowwise().sum();
        }
        scale_blocks(ZM, w.gamma[i].replicate(1, B), B);
        if (want_params) {
          MutM W2bar(theta_bar->data() + d.w2, d.out, d.in);
          W2bar.noalias() += ZM * w.XU[i].transpose();
          MutV(theta_bar->data() + d.b2, d.out) +=
              ZM.leftCols(B).rowwise().sum();
        }
        if (i == 0) {
          if (!want_state) return Mat();
          Mat zin;
          zin.noalias() = W2.transpose() * ZM.leftCols(B);
          return zin;
        }
        Mat next;
        next.noalias() = W2.transpose() * ZM;
        ZM = std::move(next);
      }
      return Mat();  // unreachable
    }
  }
  throw ContractError("unknown dynamics kind");
}

Mat basis_tangents(Index n, Index B) {
  Mat U = Mat::Zero(n, n * B);
  for (Index j = 0; j < n; ++j) U.block(j, j * B, 1, B).setOnes();
  return U;
}

Vec contract_trace(const Mat& out_tan, TraceMode mode, const Mat* Eps, Index n,
                   Index B) {
  Vec tr = Vec::Zero(B);
  if (mode == TraceMode::Exact) {
    for (Index j = 0; j < n; ++j)
      tr += out_tan.block(j, j * B, 1, B).transpose();
  } else {
    for (Index b = 0; b < B; ++b) tr[b] = Eps->col(b).dot(out_tan.col(b));
  }
  return tr;
}

Mat trace_cotangents(const Vec& mu, TraceMode mode, const Mat* Eps, Index n,
                     Index B) {
  if (mode == TraceMode::Exact) {
    Mat M = Mat::Zero(n, n * B);
    for (Index j = 0; j < n; ++j) M.block(j, j * B, 1, B) = mu.transpose();
    return M;
  }
  return (Eps->array().rowwise() * mu.transpose().array()).matrix();
}

void check_common(const DynamicsLayer& layer, const Vec& theta, const Mat& Y) {
  require(theta.size() == layer.param_count(),
          "parameter vector length does not match layer");
  require(Y.rows() == layer.dim(), "state dimension does not match layer");
}

}  // namespace

// ---------------------------------------------------------------------------
// Descriptor construction.
// ---------------------------------------------------------------------------

std::string to_string(Gate g) { return g == Gate::Tanh ? "tanh" : "sigmoid"; }

Gate gate_from_string(const std::string& s) {
  if (s == "tanh") return Gate::Tanh;
  if (s == "sigmoid") return Gate::Sigmoid;
  throw ConfigError("unknown gate '" + s + "' (expected tanh|sigmoid)");
}

DynamicsLayer DynamicsLayer::linear(Index dim) {
  require(dim > 0, "linear layer needs positive dimension");
  DynamicsLayer l;
  l.kind_ = Kind::Linear;
  l.dim_ = dim;
  l.param_count_ = dim * dim + dim;
  return l;
}

DynamicsLayer DynamicsLayer::cubic_mlp(Index dim, Index hidden) {
  require(dim > 0 && hidden > 0, "cubic mlp needs positive dimensions");
  DynamicsLayer l;
  l.kind_ = Kind::CubicMlp;
  l.dim_ = dim;
  l.hidden_ = hidden;
  l.param_count_ = hidden * dim + hidden + dim * hidden + dim;
  return l;
}

DynamicsLayer DynamicsLayer::concatsquash(Index dim, Index hidden,
                                          int hidden_layers, int flow_steps,
                                          Gate gate) {
  require(dim > 0 && hidden > 0 && hidden_layers >= 1 && flow_steps >= 1,
          "concatsquash stack needs positive shape parameters");
  DynamicsLayer l;
  l.kind_ = Kind::ConcatSquash;
  l.dim_ = dim;
  l.hidden_ = hidden;
  l.hidden_layers_ = hidden_layers;
  l.flow_steps_ = flow_steps;
  l.gate_ = gate;
  for (const CsDesc& d : cs_layout(l)) l.param_count_ = d.w0 + d.out;
  return l;
}

std::vector<DynamicsLayer::AffineBlock> DynamicsLayer::affine_blocks() const {
  std::vector<AffineBlock> bs;
  switch (kind_) {
    case Kind::Linear:
      bs.push_back({dim_, dim_, 0, false});
      break;
    case Kind::CubicMlp:
      bs.push_back({dim_, hidden_, 0, false});
      bs.push_back({hidden_, dim_, hidden_ * dim_ + hidden_, false});
      break;
    case Kind::ConcatSquash:
      for (const CsDesc& d : cs_layout(*this)) {
        bs.push_back({d.in, d.out, d.w2, false});
        bs.push_back({1, d.out, d.w1, true});  // time-to-gate map
        bs.push_back({1, d.out, d.w0, true});  // time-to-bias map
      }
      break;
  }
  return bs;
}

std::string DynamicsLayer::kind_string() const {
  switch (kind_) {
    case Kind::Linear: return "linear";
    case Kind::CubicMlp: return "cubic-mlp";
    case Kind::ConcatSquash: return "concatsquash";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Public operations.
// ---------------------------------------------------------------------------

Mat forward(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
            double t) {
  check_common(layer, theta, Y);
  PassWork w;
  pass_forward(layer, theta, Y, t, Mat(layer.dim(), 0), w, false);
  return w.out;
}

Vec forward(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
            double t) {
  return forward(layer, theta, Mat(y), t).col(0);
}

Mat jvp_state(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
              double t, const Mat& U) {
  check_common(layer, theta, Y);
  require(U.rows() == layer.dim() && Y.cols() > 0 && U.cols() % Y.cols() == 0,
          "tangent block shape does not match batch");
  PassWork w;
  pass_forward(layer, theta, Y, t, U, w, false);
  return w.out.rightCols(U.cols());
}

Vec jvp_state(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
              double t, const Vec& u) {
  return jvp_state(layer, theta, Mat(y), t, Mat(u)).col(0);
}

Mat vjp_state(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
              double t, const Mat& Z) {
  check_common(layer, theta, Y);
  require(Z.rows() == layer.dim() && Z.cols() == Y.cols(),
          "cotangent shape does not match batch");
  PassWork w;
  pass_forward(layer, theta, Y, t, Mat(layer.dim(), 0), w, true);
  return pass_reverse(layer, theta, Y, t, w, Z, true, false, nullptr);
}

Vec vjp_state(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
              double t, const Vec& z) {
  return vjp_state(layer, theta, Mat(y), t, Mat(z)).col(0);
}

Vec vjp_params(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
               double t, const Mat& Z) {
  check_common(layer, theta, Y);
  require(Z.rows() == layer.dim() && Z.cols() == Y.cols(),
          "cotangent shape does not match batch");
  PassWork w;
  pass_forward(layer, theta, Y, t, Mat(layer.dim(), 0), w, true);
  Vec theta_bar = Vec::Zero(layer.param_count());
  pass_reverse(layer, theta, Y, t, w, Z, false, true, &theta_bar);
  return theta_bar;
}

Vec vjp_params(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
               double t, const Vec& z) {
  return vjp_params(layer, theta, Mat(y), t, Mat(z));
}

Vec exact_trace(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
                double t) {
  check_common(layer, theta, Y);
  require(layer.dim() <= 64, "exact divergence is guarded to small dimensions");
  PassWork w;
  const Mat U = basis_tangents(layer.dim(), Y.cols());
  pass_forward(layer, theta, Y, t, U, w, false);
  return contract_trace(w.out.rightCols(U.cols()), TraceMode::Exact, nullptr,
                        layer.dim(), Y.cols());
}

double exact_trace(const DynamicsLayer& layer, const Vec& theta, const Vec& y,
                   double t) {
  return exact_trace(layer, theta, Mat(y), t)[0];
}

Vec hutchinson_trace(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
                     double t, const Mat& Eps) {
  check_common(layer, theta, Y);
  require(Eps.rows() == layer.dim() && Eps.cols() == Y.cols(),
          "probe shape does not match batch");
  PassWork w;
  pass_forward(layer, theta, Y, t, Eps, w, false);
  return contract_trace(w.out.rightCols(Eps.cols()), TraceMode::Hutchinson,
                        &Eps, layer.dim(), Y.cols());
}

double hutchinson_trace(const DynamicsLayer& layer, const Vec& theta,
                        const Vec& y, double t, const Vec& eps) {
  return hutchinson_trace(layer, theta, Mat(y), t, Mat(eps))[0];
}

Mat stage_eval(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
               double t, TraceMode mode, const Mat* Eps, Vec* trace_out) {
  check_common(layer, theta, Y);
  PassWork w;
  if (mode == TraceMode::None) {
    pass_forward(layer, theta, Y, t, Mat(layer.dim(), 0), w, false);
  } else {
    require(mode != TraceMode::Hutchinson || Eps != nullptr,
            "hutchinson mode needs a probe matrix");
    require(mode != TraceMode::Exact || layer.dim() <= 64,
            "exact divergence is guarded to small dimensions");
    const Mat U = (mode == TraceMode::Exact)
                      ? basis_tangents(layer.dim(), Y.cols())
                      : *Eps;
    pass_forward(layer, theta, Y, t, U, w, false);
    if (trace_out)
      *trace_out = contract_trace(w.out.rightCols(U.cols()), mode, Eps,
                                  layer.dim(), Y.cols());
  }
  return w.out.leftCols(Y.cols());
}

Mat stage_vjp(const DynamicsLayer& layer, const Vec& theta, const Mat& Y,
              double t, const Mat& Z, const Vec* trace_cot, TraceMode mode,
              const Mat* Eps, Vec& theta_bar) {
  check_common(layer, theta, Y);
  require(Z.rows() == layer.dim() && Z.cols() == Y.cols(),
          "cotangent shape does not match batch");
  require(theta_bar.size() == layer.param_count(),
          "theta_bar must be preallocated to the parameter count");
  const Index B = Y.cols();
  const bool with_trace = trace_cot != nullptr && mode != TraceMode::None;

  PassWork w;
  Mat U(layer.dim(), 0);
  if (with_trace) {
    require(mode != TraceMode::Hutchinson || Eps != nullptr,
            "hutchinson mode needs a probe matrix");
    U = (mode == TraceMode::Exact) ? basis_tangents(layer.dim(), B) : *Eps;
  }
  pass_forward(layer, theta, Y, t, U, w, true);

  Mat ZM(layer.dim(), B + U.cols());
  ZM.leftCols(B) = Z;
  if (with_trace)
    ZM.rightCols(U.cols()) =
        trace_cotangents(*trace_cot, mode, Eps, layer.dim(), B);
  return pass_reverse(layer, theta, Y, t, w, std::move(ZM), true, true,
                      &theta_bar);
}

}  // namespace odeflow
