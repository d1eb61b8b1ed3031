#include "reidmamba/ssm.hpp"

#include "reidmamba/init.hpp"
#include "reidmamba/ops.hpp"

#include <cmath>
#include <memory>
#include <numeric>

namespace reidmamba {
namespace {

Matrix reversed(const Matrix& m) { return m.colwise().reverse(); }

}  // namespace

SsmParams SsmParams::init(const std::string& prefix, int channels, int state_dim, int dt_rank, int conv_width,
                          std::mt19937_64& rng) {
  if (channels < 1 || state_dim < 1 || dt_rank < 1 || conv_width < 1) {
    throw std::invalid_argument("ssm dimensions must be positive");
  }
  SsmParams p;
  p.channels = channels;
  p.state_dim = state_dim;
  p.dt_rank = dt_rank;
  p.conv_width = conv_width;
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(conv_width));
  p.conv_weight = Parameter(prefix + ".conv_weight", init::uniform(channels, conv_width, conv_bound, rng));
  p.conv_bias = Parameter(prefix + ".conv_bias", init::uniform(1, channels, conv_bound, rng));
  p.b_proj = Parameter(prefix + ".b_proj", init::dense(channels, state_dim, rng));
  p.c_proj = Parameter(prefix + ".c_proj", init::dense(channels, state_dim, rng));
  p.dt_in = Parameter(prefix + ".dt_in", init::dense(channels, dt_rank, rng));
  p.dt_weight = Parameter(prefix + ".dt_weight",
                          init::uniform(dt_rank, channels, 1.0 / std::sqrt(static_cast<double>(dt_rank)), rng));
  // softplus(dt_bias) log-uniform in [1e-3, 1e-1].
  Matrix dt_bias(1, channels);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int d = 0; d < channels; ++d) {
    const double dt = std::exp(unit(rng) * (std::log(0.1) - std::log(1e-3)) + std::log(1e-3));
    dt_bias(0, d) = dt + std::log(-std::expm1(-dt));
  }
  p.dt_bias = Parameter(prefix + ".dt_bias", dt_bias);
  Matrix a_log(channels, state_dim);
  for (int d = 0; d < channels; ++d) {
    for (int s = 0; s < state_dim; ++s) a_log(d, s) = std::log(static_cast<double>(s + 1));
  }
  p.a_log = Parameter(prefix + ".a_log", a_log);
  p.d_skip = Parameter(prefix + ".d_skip", Matrix::Ones(1, channels));
  return p;
}

Matrix SsmParams::state_matrix() const { return -a_log.value.array().exp().matrix(); }

Matrix selective_scan(const Matrix& u, const Matrix& delta, const SsmParams& params, ScanDirection direction) {
  if (u.cols() != params.channels) throw std::invalid_argument("scan input width does not match ssm channels");
  const bool rev = direction == ScanDirection::backward;
  const Matrix uu = rev ? reversed(u) : u;
  const Matrix dd = rev ? reversed(delta) : delta;
  const Matrix b = uu * params.b_proj.value;
  const Matrix c = uu * params.c_proj.value;
  Matrix y = scan_kernel<double>(uu, dd, params.state_matrix(), b, c, params.d_skip.value);
  return rev ? reversed(y) : y;
}

namespace ag {

Var reverse_rows(Var x) {
  const auto rows = static_cast<int>(x.graph->value(x).rows());
  std::vector<int> idx(static_cast<std::size_t>(rows));
  std::iota(idx.rbegin(), idx.rend(), 0);
  return gather_rows(x, std::move(idx));
}

Var selective_scan(Var u, Var delta, Var a, Var b, Var c, Var d_skip) {
  Graph& g = *u.graph;
  const bool rg = g.requires_grad(u) || g.requires_grad(delta) || g.requires_grad(a) || g.requires_grad(b) ||
                  g.requires_grad(c) || g.requires_grad(d_skip);
  auto trace = rg ? std::make_shared<ScanTrace<double>>() : nullptr;
  Matrix y = scan_kernel<double>(g.value(u), g.value(delta), g.value(a), g.value(b), g.value(c), g.value(d_skip),
                                 trace.get());
  return g.record(std::move(y), rg, [u, delta, a, b, c, d_skip, trace](Graph& g, const Matrix& gy, const Matrix&) {
    const Matrix& uv = g.value(u);
    const Matrix& dv = g.value(delta);
    const Matrix& av = g.value(a);
    const Matrix& bv = g.value(b);
    const Matrix& cv = g.value(c);
    const Matrix& sv = g.value(d_skip);
    const Eigen::Index steps = uv.rows();
    const Eigen::Index channels = uv.cols();
    const Eigen::Index n = av.cols();
    const Eigen::Index width = channels * n;
    Matrix gu = Matrix::Zero(steps, channels);
    Matrix gd = Matrix::Zero(steps, channels);
    Matrix gb = Matrix::Zero(steps, n);
    Matrix gc = Matrix::Zero(steps, n);
    Matrix ga = Matrix::Zero(channels, n);
    Matrix gs = Matrix::Zero(1, channels);
    // gh holds dL/dh_t while step t is processed.
    std::vector<double> gh(static_cast<std::size_t>(width), 0.0);
    for (Eigen::Index t = steps - 1; t >= 0; --t) {
      const double* e = trace->decay.data() + t * width;
      const double* ht = trace->states.data() + t * width;
      const double* hprev = t > 0 ? trace->states.data() + (t - 1) * width : nullptr;
      const double* bt = bv.data() + t * n;
      const double* ct = cv.data() + t * n;
      double* gbt = gb.data() + t * n;
      double* gct = gc.data() + t * n;
      for (Eigen::Index d = 0; d < channels; ++d) {
        const double gyd = gy(t, d);
        const double dt = dv(t, d);
        const double ut = uv(t, d);
        const double drive = dt * ut;
        const double* ad = av.data() + d * n;
        double* gad = ga.data() + d * n;
        double* ghd = gh.data() + d * n;
        double q = 0.0;
        double through_a = 0.0;
        for (Eigen::Index s = 0; s < n; ++s) {
          const Eigen::Index k = d * n + s;
          const double gk = ghd[s] + gyd * ct[s];
          gct[s] += gyd * ht[k];
          if (hprev != nullptr) {
            const double through = gk * hprev[k] * e[k];
            gad[s] += through * dt;
            through_a += through * ad[s];
          }
          q += gk * bt[s];
          gbt[s] += drive * gk;
          ghd[s] = gk * e[k];
        }
        gs(0, d) += gyd * ut;
        gu(t, d) += gyd * sv(0, d) + q * dt;
        gd(t, d) += through_a + q * ut;
      }
    }
    g.accumulate(u, gu);
    g.accumulate(delta, gd);
    g.accumulate(a, ga);
    g.accumulate(b, gb);
    g.accumulate(c, gc);
    g.accumulate(d_skip, gs);
  });
}

}  // namespace ag

BiMbBlock BiMbBlock::init(const std::string& prefix, const BlockConfig& cfg, std::mt19937_64& rng) {
  if (cfg.dim < 1 || cfg.inner_dim < 1) throw std::invalid_argument("block dimensions must be positive");
  if (!(cfg.drop_rate >= 0.0 && cfg.drop_rate < 1.0)) throw std::invalid_argument("drop_rate must be in [0, 1)");
  BiMbBlock blk;
  blk.cfg = cfg;
  blk.norm_gamma = Parameter(prefix + ".norm_gamma", Matrix::Ones(1, cfg.dim));
  blk.norm_beta = Parameter(prefix + ".norm_beta", Matrix::Zero(1, cfg.dim));
  blk.in_value = Parameter(prefix + ".in_value", init::dense(cfg.dim, cfg.inner_dim, rng));
  blk.in_gate = Parameter(prefix + ".in_gate", init::dense(cfg.dim, cfg.inner_dim, rng));
  blk.out_proj = Parameter(prefix + ".out_proj", init::dense(cfg.inner_dim, cfg.dim, rng));
  blk.forward_ssm =
      SsmParams::init(prefix + ".fwd", cfg.inner_dim, cfg.state_dim, cfg.dt_rank, cfg.conv_width, rng);
  blk.backward_ssm =
      SsmParams::init(prefix + ".bwd", cfg.inner_dim, cfg.state_dim, cfg.dt_rank, cfg.conv_width, rng);
  return blk;
}

ag::Var ssm_path(ag::Var value, SsmParams& params, ScanDirection direction) {
  ag::Graph& g = *value.graph;
  const bool rev = direction == ScanDirection::backward;
  ag::Var v = rev ? ag::reverse_rows(value) : value;
  ag::Var conv = ag::silu(ag::causal_depthwise_conv(v, g.param(params.conv_weight), g.param(params.conv_bias)));
  ag::Var dt_low = ag::matmul(conv, g.param(params.dt_in));
  ag::Var delta = ag::softplus(ag::linear(dt_low, g.param(params.dt_weight), g.param(params.dt_bias)));
  ag::Var b = ag::matmul(conv, g.param(params.b_proj));
  ag::Var c = ag::matmul(conv, g.param(params.c_proj));
  ag::Var a = ag::scale(ag::exp(g.param(params.a_log)), -1.0);
  ag::Var y = ag::selective_scan(conv, delta, a, b, c, g.param(params.d_skip));
  return rev ? ag::reverse_rows(y) : y;
}

ag::Var bimb_forward(ag::Var x, BiMbBlock& block, Mode mode, double drop_draw) {
  const double p = block.cfg.drop_rate;
  if (mode == Mode::train && drop_draw < p) return x;
  ag::Graph& g = *x.graph;
  ag::Var h = ag::layer_norm(x, g.param(block.norm_gamma), g.param(block.norm_beta));
  ag::Var value = ag::matmul(h, g.param(block.in_value));
  ag::Var gate = ag::silu(ag::matmul(h, g.param(block.in_gate)));
  ag::Var both = ag::add(ssm_path(value, block.forward_ssm, ScanDirection::forward),
                         ssm_path(value, block.backward_ssm, ScanDirection::backward));
  ag::Var residual = ag::matmul(ag::mul(gate, both), g.param(block.out_proj));
  if (mode == Mode::train && p > 0.0) residual = ag::scale(residual, 1.0 / (1.0 - p));
  ag::Var out = ag::add(x, residual);
  if (!g.value(out).allFinite()) throw std::domain_error("bimb_forward produced non-finite values");
  return out;
}

TokenSequence backbone_forward(const TokenSequence& z, Backbone& backbone, int depth, Mode mode,
                               const DropSource& drops, int first_block_id) {
  if (depth < 0 || depth > static_cast<int>(backbone.blocks.size())) {
    throw std::out_of_range("backbone depth " + std::to_string(depth) + " outside [0, " +
                            std::to_string(backbone.blocks.size()) + "]");
  }
  TokenSequence out = z;
  for (int i = 0; i < depth; ++i) {
    const double draw = (mode == Mode::train && drops) ? drops(first_block_id + i) : 1.0;
    out.data = bimb_forward(out.data, backbone.blocks[static_cast<std::size_t>(i)], mode, draw);
  }
  return out;
}

}  // namespace reidmamba
