#pragma once

// Patch tokenization and the interleaved class-token layout.
//
// With M class tokens and N image tokens the sequence holds J = floor(N/(M+1))
// image tokens, a class token, J image tokens, a class token, ... and the
// N - M*J leftover image tokens at the tail. Class token j sits at
// (j+1)*J + j.

#include "reidmamba/autograd.hpp"
#include "reidmamba/image.hpp"

#include <random>
#include <vector>

namespace reidmamba {

struct EmbedConfig {
  int image_height = 256;
  int image_width = 128;
  int patch_size = 16;
  int stride = 16;
  int embed_dim = 384;
  int num_class_tokens = 12;
  int num_cameras = 6;
  double side_weight = 3.0;

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
  int patch_dim() const { return patch_size * patch_size * 3; }
};

struct PatchGrid {
  int rows = 0;
  int cols = 0;
  int count = 0;
};

struct TokenLayout {
  int num_class = 0;
  int num_image = 0;
  int spacing = 0;
  std::vector<int> class_positions;
  std::vector<int> image_positions;

  int length() const { return num_class + num_image; }
};

/// A (M+N) x D token matrix living on a graph plus its layout.
struct TokenSequence {
  ag::Var data;
  TokenLayout layout;
};

struct EmbeddingState {
  Parameter patch_weight;  // patch_dim x D
  Parameter patch_bias;    // 1 x D
  Parameter class_tokens;  // M x D
  Parameter position;      // (M+N) x D
  Parameter side;          // num_cameras x D

  static EmbeddingState init(const EmbedConfig& cfg, std::mt19937_64& rng);

  template <typename F>
  void for_each_parameter(F&& f) {
    f(patch_weight);
    f(patch_bias);
    f(class_tokens);
    f(position);
    f(side);
  }
};

PatchGrid compute_patch_grid(const EmbedConfig& cfg);

/// Positions (j+1)*J + j for j = 0..M-1. Requires 1 <= M < N.
std::vector<int> class_token_positions(int num_class, int num_image);

/// Full layout bookkeeping for M class and N image tokens. Requires 1 <= M < N.
TokenLayout make_layout(int num_class, int num_image);

/// im2col: row i holds patch i (row-major over the grid), flattened as
/// (patch row, patch col, channel).
Matrix extract_patches(const Image& img, const EmbedConfig& cfg);

/// Projects every patch to D dims: N x D.
ag::Var patchify_project(ag::Graph& g, const Image& img, EmbeddingState& state, const EmbedConfig& cfg);

/// Places class and image rows at their layout positions.
ag::Var interleave_tokens(ag::Var class_tokens, ag::Var image_tokens, const TokenLayout& layout);

/// Interleaves the learnable class tokens with the patch tokens and adds the
/// position embedding plus side_weight * side[camera] to every row.
TokenSequence assemble_sequence(ag::Graph& g, ag::Var patch_tokens, EmbeddingState& state, int camera,
                                const EmbedConfig& cfg);

}  // namespace reidmamba
