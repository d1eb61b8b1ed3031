#include "reidmamba/mgfe.hpp"

#include "reidmamba/init.hpp"
#include "reidmamba/ops.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace reidmamba {
namespace {

int group_size_for(int rows, int level) {
  if (level < 0 || level > 30) throw std::invalid_argument("fusion level out of range");
  const int group = 1 << level;
  if (rows % group != 0) {
    throw std::invalid_argument("cannot fuse " + std::to_string(rows) + " class tokens in groups of " +
                                std::to_string(group));
  }
  return group;
}

// Per output entry: value and, for min/max, the source row that produced it.
struct FuseResult {
  Matrix out;
  std::vector<int> source;  // out.size() entries, row index into the input
};

FuseResult fuse_values(const Matrix& x, int group, FusionKind kind, double p) {
  const Eigen::Index out_rows = x.rows() / group;
  FuseResult r;
  r.out.resize(out_rows, x.cols());
  r.source.assign(static_cast<std::size_t>(r.out.size()), -1);
  for (Eigen::Index j = 0; j < out_rows; ++j) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const Eigen::Index first = j * group;
      double v = x(first, c);
      int src = static_cast<int>(first);
      switch (kind) {
        case FusionKind::max:
          for (Eigen::Index i = 1; i < group; ++i) {
            if (x(first + i, c) > v) {
              v = x(first + i, c);
              src = static_cast<int>(first + i);
            }
          }
          break;
        case FusionKind::min:
          for (Eigen::Index i = 1; i < group; ++i) {
            if (x(first + i, c) < v) {
              v = x(first + i, c);
              src = static_cast<int>(first + i);
            }
          }
          break;
        case FusionKind::avg: {
          double acc = 0.0;
          for (Eigen::Index i = 0; i < group; ++i) acc += x(first + i, c);
          v = acc / group;
          break;
        }
        case FusionKind::gem: {
          double acc = 0.0;
          for (Eigen::Index i = 0; i < group; ++i) acc += std::pow(std::max(x(first + i, c), kGemEpsilon), p);
          v = std::pow(acc / group, 1.0 / p);
          break;
        }
      }
      r.out(j, c) = v;
      r.source[static_cast<std::size_t>(j * x.cols() + c)] = src;
    }
  }
  return r;
}

}  // namespace

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::min: return "min";
    case FusionKind::max: return "max";
    case FusionKind::avg: return "avg";
    case FusionKind::gem: return "gem";
  }
  return "max";
}

FusionKind parse_fusion(const std::string& name) {
  if (name == "min") return FusionKind::min;
  if (name == "max") return FusionKind::max;
  if (name == "avg") return FusionKind::avg;
  if (name == "gem") return FusionKind::gem;
  throw std::invalid_argument("unknown fusion op '" + name + "' (expected min, max, avg or gem)");
}

Matrix fuse_class_tokens(const Matrix& class_tokens, int level, FusionKind kind, double gem_power) {
  const int group = group_size_for(static_cast<int>(class_tokens.rows()), level);
  if (kind == FusionKind::gem && !(gem_power > 0.0)) throw std::invalid_argument("gem power must be > 0");
  if (group == 1) return class_tokens;
  return fuse_values(class_tokens, group, kind, gem_power).out;
}

ag::Var fuse_class_tokens(ag::Var class_tokens, int level, FusionKind kind, std::optional<ag::Var> gem_power) {
  ag::Graph& g = *class_tokens.graph;
  const Matrix& x = g.value(class_tokens);
  const int group = group_size_for(static_cast<int>(x.rows()), level);
  if (group == 1) return class_tokens;

  if (kind != FusionKind::gem) {
    FuseResult r = fuse_values(x, group, kind, 1.0);
    return g.record(std::move(r.out), g.requires_grad(class_tokens),
                    [class_tokens, group, kind, source = std::move(r.source)](ag::Graph& g, const Matrix& go,
                                                                              const Matrix&) {
                      const Matrix& x = g.value(class_tokens);
                      Matrix dx = Matrix::Zero(x.rows(), x.cols());
                      for (Eigen::Index j = 0; j < go.rows(); ++j) {
                        for (Eigen::Index c = 0; c < go.cols(); ++c) {
                          if (kind == FusionKind::avg) {
                            for (int i = 0; i < group; ++i) dx(j * group + i, c) += go(j, c) / group;
                          } else {
                            dx(source[static_cast<std::size_t>(j * go.cols() + c)], c) += go(j, c);
                          }
                        }
                      }
                      g.accumulate(class_tokens, dx);
                    });
  }

  if (!gem_power) throw std::invalid_argument("gem fusion needs a power variable");
  const ag::Var power = *gem_power;
  const double p = g.value(power)(0, 0);
  if (!(p > 0.0)) throw std::invalid_argument("gem power must be > 0");
  FuseResult r = fuse_values(x, group, kind, p);
  const bool rg = g.requires_grad(class_tokens) || g.requires_grad(power);
  return g.record(std::move(r.out), rg, [class_tokens, power, group](ag::Graph& g, const Matrix& go, const Matrix& y) {
    const Matrix& x = g.value(class_tokens);
    const double p = g.value(power)(0, 0);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    double dp = 0.0;
    for (Eigen::Index j = 0; j < go.rows(); ++j) {
      for (Eigen::Index c = 0; c < go.cols(); ++c) {
        // y = m^(1/p), m = mean_i max(x_i, eps)^p
        double m = 0.0;
        double m_log = 0.0;
        for (int i = 0; i < group; ++i) {
          const double v = std::max(x(j * group + i, c), kGemEpsilon);
          const double vp = std::pow(v, p);
          m += vp / group;
          m_log += vp * std::log(v) / group;
        }
        const double yv = y(j, c);
        for (int i = 0; i < group; ++i) {
          const double xv = x(j * group + i, c);
          if (xv <= kGemEpsilon) continue;
          dx(j * group + i, c) += go(j, c) * yv / m * std::pow(xv, p - 1.0) / group;
        }
        dp += go(j, c) * yv * (-std::log(m) / (p * p) + m_log / (p * m));
      }
    }
    g.accumulate(class_tokens, dx);
    Matrix gp(1, 1);
    gp(0, 0) = dp;
    g.accumulate(power, gp);
  });
}

SplitTokens split_tokens(const TokenSequence& z) {
  return SplitTokens{ag::gather_rows(z.data, z.layout.class_positions), ag::gather_rows(z.data, z.layout.image_positions)};
}

TokenSequence reinterleave_tokens(ag::Var class_tokens, ag::Var image_tokens) {
  ag::Graph& g = *class_tokens.graph;
  TokenLayout layout = make_layout(static_cast<int>(g.value(class_tokens).rows()),
                                   static_cast<int>(g.value(image_tokens).rows()));
  ag::Var data = interleave_tokens(class_tokens, image_tokens, layout);
  return TokenSequence{data, std::move(layout)};
}

void ModelConfig::validate() const {
  embed.validate();
  if (depth < 3) throw std::invalid_argument("depth must be >= 3 so the shared trunk has L-2 >= 1 blocks");
  if (branches < 1) throw std::invalid_argument("branches must be >= 1");
  if (reduction < 1) throw std::invalid_argument("reduction must be >= 1");
  if (state_dim < 1 || conv_width < 1 || inner_dim < 0 || dt_rank < 0) {
    throw std::invalid_argument("invalid ssm dimensions");
  }
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw std::invalid_argument("drop_rate must be in [0, 1)");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if ((embed.num_class_tokens * embed.embed_dim) % reduction != 0) {
    throw std::invalid_argument("M*D must be divisible by r");
  }
  for (int g = 0; g < branches; ++g) {
    if (embed.num_class_tokens % (1 << g) != 0) {
      throw std::invalid_argument("M must be divisible by 2^g for every branch g < G");
    }
    if ((embed.embed_dim << g) % reduction != 0) {
      throw std::invalid_argument("D*2^g must be divisible by r for every branch g < G");
    }
  }
  const int n = compute_patch_grid(embed).count;
  if (embed.num_class_tokens >= n) throw std::invalid_argument("need fewer class tokens than patches");
}

BlockConfig ModelConfig::block_config() const {
  BlockConfig b;
  b.dim = embed.embed_dim;
  b.inner_dim = inner_dim > 0 ? inner_dim : 2 * embed.embed_dim;
  b.state_dim = state_dim;
  b.dt_rank = dt_rank > 0 ? dt_rank : (embed.embed_dim + 15) / 16;
  b.conv_width = conv_width;
  b.drop_rate = drop_rate;
  return b;
}

int branch_block_id(const ModelConfig& cfg, int branch) { return cfg.depth - 2 + 2 * branch; }

ReidModel ReidModel::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ReidModel m;
  m.cfg = cfg;
  m.embed = EmbeddingState::init(cfg.embed, rng);
  const BlockConfig bc = m.cfg.block_config();
  for (int i = 0; i < cfg.depth - 2; ++i) {
    m.trunk.blocks.push_back(BiMbBlock::init("trunk.block" + std::to_string(i), bc, rng));
  }
  const int d = cfg.embed.embed_dim;
  for (int g = 0; g < cfg.branches; ++g) {
    const std::string prefix = "branch" + std::to_string(g);
    Branch b;
    b.index = g;
    b.class_count = cfg.class_count(g);
    b.reduced_dim = cfg.reduced_dim(g);
    b.fusion = cfg.fusion;
    for (int j = 0; j < 2; ++j) b.blocks.blocks.push_back(BiMbBlock::init(prefix + ".block" + std::to_string(j), bc, rng));
    b.row_norm_gamma = Parameter(prefix + ".row_norm_gamma", Matrix::Ones(1, d));
    b.row_norm_beta = Parameter(prefix + ".row_norm_beta", Matrix::Zero(1, d));
    b.reduce_weight = Parameter(prefix + ".reduce_weight", init::dense(d, b.reduced_dim, rng));
    b.reduce_bias = Parameter(prefix + ".reduce_bias", Matrix::Zero(1, b.reduced_dim));
    b.feat_norm_gamma = Parameter(prefix + ".feat_norm_gamma", Matrix::Ones(1, cfg.feature_dim()));
    b.feat_norm_beta = Parameter(prefix + ".feat_norm_beta", Matrix::Zero(1, cfg.feature_dim()));
    b.gem_power = Parameter(prefix + ".gem_power", Matrix::Constant(1, 1, 3.0));
    m.branches.push_back(std::move(b));
  }
  for (int g = 0; g < cfg.branches; ++g) {
    m.necks.push_back(BnNeckHead::init("neck" + std::to_string(g), cfg.feature_dim(), cfg.num_classes, rng));
  }
  return m;
}

std::vector<std::pair<std::string, Matrix*>> ReidModel::state_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out;
  for_each_parameter([&](Parameter& p) { out.emplace_back(p.name, &p.value); });
  for (std::size_t g = 0; g < necks.size(); ++g) {
    out.emplace_back("neck" + std::to_string(g) + ".running_mean", &necks[g].running_mean);
    out.emplace_back("neck" + std::to_string(g) + ".running_var", &necks[g].running_var);
  }
  return out;
}

std::size_t ReidModel::parameter_count() {
  std::size_t n = 0;
  for_each_parameter([&](Parameter& p) { n += static_cast<std::size_t>(p.value.size()); });
  return n;
}

ag::Var branch_forward(const TokenSequence& shared, Branch& branch, Mode mode, const DropSource& drops,
                       int first_block_id) {
  ag::Graph& g = *shared.data.graph;
  SplitTokens split = split_tokens(shared);
  std::optional<ag::Var> power;
  if (branch.fusion == FusionKind::gem) power = g.param(branch.gem_power);
  ag::Var fused = fuse_class_tokens(split.class_tokens, branch.index, branch.fusion, power);
  TokenSequence seq = reinterleave_tokens(fused, split.image_tokens);
  seq = backbone_forward(seq, branch.blocks, static_cast<int>(branch.blocks.blocks.size()), mode, drops,
                         first_block_id);
  return ag::gather_rows(seq.data, seq.layout.class_positions);
}

ag::Var extract_branch_feature(ag::Var class_rows, Branch& branch) {
  ag::Graph& g = *class_rows.graph;
  const Matrix& x = g.value(class_rows);
  if (x.rows() != branch.class_count || x.cols() != branch.row_norm_gamma.value.cols()) {
    throw std::invalid_argument("class rows do not match the branch shape");
  }
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (x.row(r).isZero(0.0)) throw std::domain_error("cannot normalize an all-zero class token row");
  }
  ag::Var rows = ag::layer_norm(class_rows, g.param(branch.row_norm_gamma), g.param(branch.row_norm_beta));
  ag::Var reduced = ag::linear(rows, g.param(branch.reduce_weight), g.param(branch.reduce_bias));
  return ag::layer_norm(ag::flatten(reduced), g.param(branch.feat_norm_gamma), g.param(branch.feat_norm_beta));
}

std::vector<ag::Var> sample_features(ag::Graph& g, const Image& img, int camera, ReidModel& model, Mode mode,
                                     const DropSource& drops) {
  const ModelConfig& cfg = model.cfg;
  ag::Var patches = patchify_project(g, img, model.embed, cfg.embed);
  TokenSequence z0 = assemble_sequence(g, patches, model.embed, camera, cfg.embed);
  TokenSequence shared = backbone_forward(z0, model.trunk, cfg.depth - 2, mode, drops, 0);
  std::vector<ag::Var> out;
  out.reserve(model.branches.size());
  for (auto& branch : model.branches) {
    ag::Var rows = branch_forward(shared, branch, mode, drops, branch_block_id(cfg, branch.index));
    out.push_back(extract_branch_feature(rows, branch));
  }
  return out;
}

FeatureBundle model_forward(const std::vector<Image>& images, const std::vector<int>& cameras, ReidModel& model,
                            Mode mode, const DropSource& drops) {
  if (images.empty() || images.size() != cameras.size()) {
    throw std::invalid_argument("model_forward needs one camera id per image");
  }
  ag::Graph g;
  std::vector<std::vector<ag::Var>> per_branch(model.branches.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<ag::Var> f = sample_features(g, images[i], cameras[i], model, mode, drops);
    for (std::size_t b = 0; b < f.size(); ++b) per_branch[b].push_back(f[b]);
  }
  FeatureBundle bundle;
  for (std::size_t b = 0; b < per_branch.size(); ++b) {
    ag::Var f = ag::concat_rows(per_branch[b]);
    NeckOutput neck = bnneck_apply(f, model.necks[b], mode);
    bundle.features.push_back(g.value(f));
    bundle.bn_features.push_back(g.value(neck.bn_features));
    bundle.logits.push_back(g.value(neck.logits));
  }
  return bundle;
}

FeatureBundle model_forward(const Image& image, ReidModel& model, int camera, Mode mode) {
  return model_forward(std::vector<Image>{image}, std::vector<int>{camera}, model, mode);
}

}  // namespace reidmamba
