#pragma once

// Multi-granularity feature extractor and the full model.
//
// The shared trunk runs the first L-2 blocks. Branch g splits the class
// tokens off, fuses adjacent groups of 2^g of them, re-interleaves the M/2^g
// fused tokens with the untouched image tokens, runs two branch-owned blocks
// and reduces the class rows to an M*D/r feature.

#include "reidmamba/autograd.hpp"
#include "reidmamba/image.hpp"
#include "reidmamba/losses.hpp"
#include "reidmamba/ssm.hpp"
#include "reidmamba/token_layout.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace reidmamba {

enum class FusionKind { min, max, avg, gem };

std::string to_string(FusionKind kind);
FusionKind parse_fusion(const std::string& name);

/// Lower clamp applied before the generalized-mean power.
inline constexpr double kGemEpsilon = 1e-6;

/// Elementwise fusion of adjacent groups of 2^level rows. A group of one row
/// is returned unchanged for every kind.
Matrix fuse_class_tokens(const Matrix& class_tokens, int level, FusionKind kind, double gem_power = 3.0);
/// Differentiable version; gem_power is a 1 x 1 variable and only read for gem.
ag::Var fuse_class_tokens(ag::Var class_tokens, int level, FusionKind kind, std::optional<ag::Var> gem_power = {});

struct SplitTokens {
  ag::Var class_tokens;
  ag::Var image_tokens;
};

SplitTokens split_tokens(const TokenSequence& z);
/// Same layout rule as the embedding stage, for M_g class tokens. No
/// embeddings are added.
TokenSequence reinterleave_tokens(ag::Var class_tokens, ag::Var image_tokens);

struct ModelConfig {
  EmbedConfig embed;
  int inner_dim = 0;  // 0 -> 2 * embed_dim
  int state_dim = 8;
  int dt_rank = 0;  // 0 -> ceil(embed_dim / 16)
  int conv_width = 4;
  int depth = 24;
  int reduction = 4;
  int branches = 3;
  FusionKind fusion = FusionKind::max;
  double drop_rate = 0.3;
  int num_classes = 2;

  void validate() const;
  BlockConfig block_config() const;
  int feature_dim() const { return embed.num_class_tokens * embed.embed_dim / reduction; }
  int total_feature_dim() const { return branches * feature_dim(); }
  int class_count(int branch) const { return embed.num_class_tokens >> branch; }
  /// Width of branch g's per-row reduction map, D / (r / 2^g).
  int reduced_dim(int branch) const { return (embed.embed_dim << branch) / reduction; }
};

struct Branch {
  int index = 0;
  int class_count = 0;
  int reduced_dim = 0;
  FusionKind fusion = FusionKind::max;
  Backbone blocks;  // two blocks
  Parameter row_norm_gamma;   // 1 x D
  Parameter row_norm_beta;    // 1 x D
  Parameter reduce_weight;    // D x reduced_dim
  Parameter reduce_bias;      // 1 x reduced_dim
  Parameter feat_norm_gamma;  // 1 x MD/r
  Parameter feat_norm_beta;   // 1 x MD/r
  Parameter gem_power;        // 1 x 1, trained only for gem

  template <typename F>
  void for_each_parameter(F&& f) {
    blocks.for_each_parameter(f);
    f(row_norm_gamma);
    f(row_norm_beta);
    f(reduce_weight);
    f(reduce_bias);
    f(feat_norm_gamma);
    f(feat_norm_beta);
    if (fusion == FusionKind::gem) f(gem_power);
  }
};

/// Split -> fuse -> re-interleave -> two branch blocks -> class rows (M_g x D).
/// Branch blocks use drop ids first_block_id and first_block_id + 1.
ag::Var branch_forward(const TokenSequence& shared, Branch& branch, Mode mode, const DropSource& drops,
                       int first_block_id);

/// Row layer norm -> per-row map D -> reduced_dim -> concatenation -> layer
/// norm. Rejects all-zero class rows. Output is 1 x M*D/r.
ag::Var extract_branch_feature(ag::Var class_rows, Branch& branch);

struct ReidModel {
  ModelConfig cfg;
  EmbeddingState embed;
  Backbone trunk;
  std::vector<Branch> branches;
  std::vector<BnNeckHead> necks;

  static ReidModel init(const ModelConfig& cfg, std::uint64_t seed);

  /// Trainable parameters in a fixed order (embedding, trunk, branches, necks).
  template <typename F>
  void for_each_parameter(F&& f) {
    embed.for_each_parameter(f);
    trunk.for_each_parameter(f);
    for (auto& b : branches) b.for_each_parameter(f);
    for (auto& n : necks) n.for_each_parameter(f);
  }

  /// Parameters plus BNNeck running statistics, as (name, matrix) pairs.
  std::vector<std::pair<std::string, Matrix*>> state_tensors();
  std::size_t parameter_count();
};

/// Block id of branch g's first block; trunk blocks are 0..L-3.
int branch_block_id(const ModelConfig& cfg, int branch);

/// Raw per-branch features f^(g) (each 1 x M*D/r) for one image on graph g.
std::vector<ag::Var> sample_features(ag::Graph& g, const Image& img, int camera, ReidModel& model, Mode mode,
                                     const DropSource& drops = {});

struct FeatureBundle {
  std::vector<Matrix> features;     // per branch, rows = batch
  std::vector<Matrix> bn_features;  // per branch
  std::vector<Matrix> logits;       // per branch
};

/// Batch forward pass (BNNeck sees the whole batch). Nothing is backpropagated.
FeatureBundle model_forward(const std::vector<Image>& images, const std::vector<int>& cameras, ReidModel& model,
                            Mode mode, const DropSource& drops = {});
FeatureBundle model_forward(const Image& image, ReidModel& model, int camera, Mode mode);

}  // namespace reidmamba
