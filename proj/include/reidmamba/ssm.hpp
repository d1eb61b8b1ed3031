#pragma once

// Selective state-space scan and the bidirectional Mamba block (BiMB).
//
// Per channel d and state s, with A = -exp(A_log):
//   h_t[d,s] = exp(delta[t,d] * A[d,s]) * h_{t-1}[d,s] + delta[t,d] * B[t,s] * u[t,d]
//   y[t,d]   = sum_s C[t,s] * h_t[d,s] + D_skip[d] * u[t,d],     h_{-1} = 0
// The backward direction runs the same recurrence on the reversed sequence
// and reverses the result.

#include "reidmamba/autograd.hpp"
#include "reidmamba/token_layout.hpp"

#include <algorithm>
#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace reidmamba {

enum class ScanDirection { forward, backward };
enum class Mode { train, eval };

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-step decays exp(delta_t[d] * a[d, s]) and states h_t, each stored as
/// T x (Di * n) with column d * n + s.
template <typename Scalar>
struct ScanTrace {
  MatrixT<Scalar> decay;
  MatrixT<Scalar> states;
};

/// Forward-direction scan kernel. u, delta: T x Di; a: Di x n; b, c: T x n;
/// d_skip: 1 x Di. All decays are computed up front in one vectorized exp;
/// `trace`, when given, keeps them together with every state for backward.
template <typename Scalar>
MatrixT<Scalar> scan_kernel(const MatrixT<Scalar>& u, const MatrixT<Scalar>& delta, const MatrixT<Scalar>& a,
                            const MatrixT<Scalar>& b, const MatrixT<Scalar>& c, const MatrixT<Scalar>& d_skip,
                            ScanTrace<Scalar>* trace = nullptr) {
  const Eigen::Index steps = u.rows();
  const Eigen::Index channels = u.cols();
  const Eigen::Index n = a.cols();
  if (steps < 1) throw std::invalid_argument("selective scan needs T >= 1");
  if (delta.rows() != steps || delta.cols() != channels || a.rows() != channels || b.rows() != steps ||
      b.cols() != n || c.rows() != steps || c.cols() != n || d_skip.rows() != 1 || d_skip.cols() != channels) {
    throw std::invalid_argument("selective scan shape mismatch");
  }
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    const Scalar v = delta.data()[i];
    if (!(v > Scalar(0)) || !std::isfinite(v)) throw std::domain_error("selective scan needs finite delta > 0");
  }
  if (!u.allFinite() || !a.allFinite() || !b.allFinite() || !c.allFinite() || !d_skip.allFinite()) {
    throw std::domain_error("selective scan received non-finite input");
  }
  const Eigen::Index width = channels * n;
  MatrixT<Scalar> decay(steps, width);
  for (Eigen::Index t = 0; t < steps; ++t) {
    Scalar* row = decay.data() + t * width;
    for (Eigen::Index d = 0; d < channels; ++d) {
      const Scalar dt = delta(t, d);
      const Scalar* ad = a.data() + d * n;
      for (Eigen::Index s = 0; s < n; ++s) row[d * n + s] = dt * ad[s];
    }
  }
  decay = decay.array().exp().matrix();

  MatrixT<Scalar> states;
  if (trace != nullptr) states.resize(steps, width);
  std::vector<Scalar> h(static_cast<std::size_t>(width), Scalar(0));
  MatrixT<Scalar> y(steps, channels);
  for (Eigen::Index t = 0; t < steps; ++t) {
    const Scalar* e = decay.data() + t * width;
    const Scalar* bt = b.data() + t * n;
    const Scalar* ct = c.data() + t * n;
    for (Eigen::Index d = 0; d < channels; ++d) {
      const Scalar drive = delta(t, d) * u(t, d);
      Scalar* hd = h.data() + d * n;
      const Scalar* ed = e + d * n;
      Scalar acc = Scalar(0);
      for (Eigen::Index s = 0; s < n; ++s) {
        hd[s] = ed[s] * hd[s] + drive * bt[s];
        acc += hd[s] * ct[s];
      }
      y(t, d) = acc + d_skip(0, d) * u(t, d);
    }
    if (trace != nullptr) std::copy(h.begin(), h.end(), states.data() + t * width);
  }
  if (trace != nullptr) {
    trace->decay = std::move(decay);
    trace->states = std::move(states);
  }
  return y;
}

struct SsmParams {
  int channels = 0;
  int state_dim = 0;
  int dt_rank = 0;
  int conv_width = 4;
  Parameter conv_weight;  // Di x k
  Parameter conv_bias;    // 1 x Di
  Parameter b_proj;       // Di x n
  Parameter c_proj;       // Di x n
  Parameter dt_in;        // Di x dt_rank
  Parameter dt_weight;    // dt_rank x Di
  Parameter dt_bias;      // 1 x Di
  Parameter a_log;        // Di x n
  Parameter d_skip;       // 1 x Di

  static SsmParams init(const std::string& prefix, int channels, int state_dim, int dt_rank, int conv_width,
                        std::mt19937_64& rng);

  /// A = -exp(A_log), strictly negative.
  Matrix state_matrix() const;

  template <typename F>
  void for_each_parameter(F&& f) {
    f(conv_weight);
    f(conv_bias);
    f(b_proj);
    f(c_proj);
    f(dt_in);
    f(dt_weight);
    f(dt_bias);
    f(a_log);
    f(d_skip);
  }
};

/// Scan with B_t = u_t * B_proj and C_t = u_t * C_proj taken from the
/// parameters, in the requested direction. delta must be strictly positive.
Matrix selective_scan(const Matrix& u, const Matrix& delta, const SsmParams& params, ScanDirection direction);

namespace ag {
/// Differentiable forward-direction scan.
Var selective_scan(Var u, Var delta, Var a, Var b, Var c, Var d_skip);
Var reverse_rows(Var x);
}  // namespace ag

struct BlockConfig {
  int dim = 64;
  int inner_dim = 128;
  int state_dim = 8;
  int dt_rank = 4;
  int conv_width = 4;
  double drop_rate = 0.3;
};

struct BiMbBlock {
  BlockConfig cfg;
  Parameter norm_gamma;  // 1 x D
  Parameter norm_beta;   // 1 x D
  Parameter in_value;    // D x Di
  Parameter in_gate;     // D x Di
  Parameter out_proj;    // Di x D
  SsmParams forward_ssm;
  SsmParams backward_ssm;

  static BiMbBlock init(const std::string& prefix, const BlockConfig& cfg, std::mt19937_64& rng);

  template <typename F>
  void for_each_parameter(F&& f) {
    f(norm_gamma);
    f(norm_beta);
    f(in_value);
    f(in_gate);
    f(out_proj);
    forward_ssm.for_each_parameter(f);
    backward_ssm.for_each_parameter(f);
  }
};

/// One directional SSM path of a block: (optional reversal) -> causal conv ->
/// SiLU -> input-dependent delta/B/C -> scan -> (reversal back).
ag::Var ssm_path(ag::Var value, SsmParams& params, ScanDirection direction);

/// x + drop(out_proj(silu(gate) * (fwd_scan + bwd_scan))). In train mode the
/// residual is dropped when drop_draw < drop_rate and otherwise scaled by
/// 1/(1-drop_rate). Eval mode ignores drop_draw.
ag::Var bimb_forward(ag::Var x, BiMbBlock& block, Mode mode, double drop_draw);

/// Supplies the stochastic-depth uniform draw for a global block id.
using DropSource = std::function<double(int block_id)>;

struct Backbone {
  std::vector<BiMbBlock> blocks;

  template <typename F>
  void for_each_parameter(F&& f) {
    for (auto& b : blocks) b.for_each_parameter(f);
  }
};

/// Applies blocks [0, depth). Block i asks `drops` for block id first_block_id + i.
TokenSequence backbone_forward(const TokenSequence& z, Backbone& backbone, int depth, Mode mode,
                               const DropSource& drops, int first_block_id = 0);

}  // namespace reidmamba
