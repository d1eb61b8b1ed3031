#include "reidmamba/token_layout.hpp"

#include "reidmamba/init.hpp"
#include "reidmamba/ops.hpp"

#include <stdexcept>
#include <string>

namespace reidmamba {

void EmbedConfig::validate() const {
  if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
  if (stride < 1 || stride > patch_size) throw std::invalid_argument("stride must be in [1, patch_size]");
  if (image_height < patch_size || image_width < patch_size) {
    throw std::invalid_argument("image smaller than one patch");
  }
  if (num_class_tokens < 1) throw std::invalid_argument("num_class_tokens must be >= 1");
  if (embed_dim < 1) throw std::invalid_argument("embed_dim must be >= 1");
  if (num_cameras < 1) throw std::invalid_argument("num_cameras must be >= 1");
  if (!(side_weight >= 0.0)) throw std::invalid_argument("side_weight must be >= 0");
}

PatchGrid compute_patch_grid(const EmbedConfig& cfg) {
  cfg.validate();
  PatchGrid grid;
  grid.rows = (cfg.image_height + cfg.stride - cfg.patch_size) / cfg.stride;
  grid.cols = (cfg.image_width + cfg.stride - cfg.patch_size) / cfg.stride;
  if (grid.rows == 0 || grid.cols == 0) throw std::invalid_argument("image smaller than one patch");
  grid.count = grid.rows * grid.cols;
  return grid;
}

std::vector<int> class_token_positions(int num_class, int num_image) {
  if (num_class < 1 || num_class >= num_image) {
    throw std::invalid_argument("class token layout needs 1 <= M < N (M=" + std::to_string(num_class) +
                                ", N=" + std::to_string(num_image) + ")");
  }
  const int spacing = num_image / (num_class + 1);
  std::vector<int> pos(static_cast<std::size_t>(num_class));
  for (int j = 0; j < num_class; ++j) pos[static_cast<std::size_t>(j)] = (j + 1) * spacing + j;
  return pos;
}

TokenLayout make_layout(int num_class, int num_image) {
  TokenLayout layout;
  layout.class_positions = class_token_positions(num_class, num_image);
  layout.num_class = num_class;
  layout.num_image = num_image;
  layout.spacing = num_image / (num_class + 1);
  layout.image_positions.reserve(static_cast<std::size_t>(num_image));
  std::size_t next_class = 0;
  for (int p = 0; p < num_class + num_image; ++p) {
    if (next_class < layout.class_positions.size() && layout.class_positions[next_class] == p) {
      ++next_class;
    } else {
      layout.image_positions.push_back(p);
    }
  }
  return layout;
}

EmbeddingState EmbeddingState::init(const EmbedConfig& cfg, std::mt19937_64& rng) {
  const PatchGrid grid = compute_patch_grid(cfg);
  const int d = cfg.embed_dim;
  EmbeddingState s;
  s.patch_weight = Parameter("embed.patch_weight", init::dense(cfg.patch_dim(), d, rng));
  s.patch_bias = Parameter("embed.patch_bias", Matrix::Zero(1, d));
  s.class_tokens = Parameter("embed.class_tokens", init::normal(cfg.num_class_tokens, d, 0.02, rng));
  s.position = Parameter("embed.position", init::normal(cfg.num_class_tokens + grid.count, d, 0.02, rng));
  s.side = Parameter("embed.side", init::normal(cfg.num_cameras, d, 0.02, rng));
  return s;
}

Matrix extract_patches(const Image& img, const EmbedConfig& cfg) {
  if (img.height != cfg.image_height || img.width != cfg.image_width) {
    throw std::invalid_argument("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                ", config expects " + std::to_string(cfg.image_height) + "x" +
                                std::to_string(cfg.image_width));
  }
  const PatchGrid grid = compute_patch_grid(cfg);
  const int p = cfg.patch_size;
  Matrix patches(grid.count, cfg.patch_dim());
  for (int gr = 0; gr < grid.rows; ++gr) {
    for (int gc = 0; gc < grid.cols; ++gc) {
      const int row = gr * grid.cols + gc;
      int col = 0;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < 3; ++c) patches(row, col++) = img.at(gr * cfg.stride + dy, gc * cfg.stride + dx, c);
        }
      }
    }
  }
  return patches;
}

ag::Var patchify_project(ag::Graph& g, const Image& img, EmbeddingState& state, const EmbedConfig& cfg) {
  ag::Var patches = g.constant(extract_patches(img, cfg));
  return ag::linear(patches, g.param(state.patch_weight), g.param(state.patch_bias));
}

ag::Var interleave_tokens(ag::Var class_tokens, ag::Var image_tokens, const TokenLayout& layout) {
  ag::Graph& g = *class_tokens.graph;
  if (g.value(class_tokens).rows() != layout.num_class || g.value(image_tokens).rows() != layout.num_image) {
    throw std::invalid_argument("token counts do not match the layout");
  }
  // Row r of the stacked [class; image] matrix goes to sequence position order[r].
  std::vector<int> source(static_cast<std::size_t>(layout.length()));
  for (int j = 0; j < layout.num_class; ++j) source[static_cast<std::size_t>(layout.class_positions[j])] = j;
  for (int i = 0; i < layout.num_image; ++i) {
    source[static_cast<std::size_t>(layout.image_positions[i])] = layout.num_class + i;
  }
  return ag::gather_rows(ag::concat_rows({class_tokens, image_tokens}), std::move(source));
}

TokenSequence assemble_sequence(ag::Graph& g, ag::Var patch_tokens, EmbeddingState& state, int camera,
                                const EmbedConfig& cfg) {
  if (camera < 0 || camera >= cfg.num_cameras) {
    throw std::out_of_range("camera id " + std::to_string(camera) + " outside [0, " +
                            std::to_string(cfg.num_cameras) + ")");
  }
  const int n = static_cast<int>(g.value(patch_tokens).rows());
  TokenLayout layout = make_layout(cfg.num_class_tokens, n);
  ag::Var seq = interleave_tokens(g.param(state.class_tokens), patch_tokens, layout);
  seq = ag::add(seq, g.param(state.position));
  ag::Var side = ag::scale(ag::gather_rows(g.param(state.side), {camera}), cfg.side_weight);
  seq = ag::add_row(seq, side);
  return TokenSequence{seq, std::move(layout)};
}

}  // namespace reidmamba
