#include "reidmamba/mgfe.hpp"

#include "support.hpp"
#include "tiny_model.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace reidmamba;
using testing::max_abs_diff;
using testing::random_image;
using testing::random_matrix;
using testing::tiny_model_config;

namespace {

constexpr FusionKind kAllKinds[] = {FusionKind::min, FusionKind::max, FusionKind::avg, FusionKind::gem};

Matrix positive_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 3.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("split puts exactly the class rows aside") {
  std::mt19937_64 rng(1);
  ag::Graph g;
  const TokenLayout layout = make_layout(4, 32);
  Matrix data = random_matrix(36, 5, rng);
  for (int j = 0; j < 4; ++j) data.row(layout.class_positions[j]).setConstant(1000.0 + j);
  const SplitTokens s = split_tokens(TokenSequence{g.constant(data), layout});
  const Matrix& cls = g.value(s.class_tokens);
  const Matrix& img = g.value(s.image_tokens);
  REQUIRE(cls.rows() == 4);
  REQUIRE(img.rows() == 32);
  for (int j = 0; j < 4; ++j) CHECK((cls.row(j).array() == 1000.0 + j).all());
  CHECK(img.maxCoeff() < 1000.0);
}

TEST_CASE("split and reinterleave round trip") {
  std::mt19937_64 rng(2);
  for (auto [m, n] : std::vector<std::pair<int, int>>{{4, 32}, {1, 2}, {3, 17}, {12, 128}}) {
    ag::Graph g;
    const TokenLayout layout = make_layout(m, n);
    const Matrix data = random_matrix(m + n, 3, rng);
    const SplitTokens s = split_tokens(TokenSequence{g.constant(data), layout});
    const TokenSequence back = reinterleave_tokens(s.class_tokens, s.image_tokens);
    CHECK(g.value(back.data) == data);
    CHECK(back.layout.class_positions == layout.class_positions);

    // Inverse permutation oracle.
    Matrix rebuilt(m + n, 3);
    for (int j = 0; j < m; ++j) rebuilt.row(layout.class_positions[j]) = g.value(s.class_tokens).row(j);
    for (int i = 0; i < n; ++i) rebuilt.row(layout.image_positions[i]) = g.value(s.image_tokens).row(i);
    CHECK(rebuilt == data);
  }
}

TEST_CASE("reinterleave places fused tokens by the same rule") {
  ag::Graph g;
  const TokenSequence z = reinterleave_tokens(g.constant(Matrix::Ones(2, 4)), g.constant(Matrix::Zero(32, 4)));
  CHECK(z.layout.spacing == 10);
  CHECK(z.layout.class_positions == std::vector<int>{10, 21});
  CHECK(g.value(z.data).row(10).sum() == 4.0);
  CHECK(g.value(z.data).row(21).sum() == 4.0);
  CHECK(g.value(z.data).sum() == 8.0);
}

TEST_CASE("fusion values") {
  Matrix x(2, 2);
  x << 1, 4, 3, 2;
  CHECK(fuse_class_tokens(x, 1, FusionKind::max) == Matrix{{3.0, 4.0}});
  CHECK(fuse_class_tokens(x, 1, FusionKind::min) == Matrix{{1.0, 2.0}});
  CHECK(fuse_class_tokens(x, 1, FusionKind::avg) == Matrix{{2.0, 3.0}});
  for (FusionKind k : kAllKinds) CHECK(fuse_class_tokens(x, 0, k) == x);

  std::mt19937_64 rng(3);
  const Matrix p = positive_matrix(8, 5, rng);
  CHECK(max_abs_diff(fuse_class_tokens(p, 2, FusionKind::gem, 1.0), fuse_class_tokens(p, 2, FusionKind::avg)) <
        1e-12);
  // For a pair, max * 2^(-1/p) <= gem <= max, so the gap closes like ln2/p.
  const Matrix top = fuse_class_tokens(p, 1, FusionKind::max);
  double previous = INFINITY;
  for (double power : {4.0, 16.0, 64.0, 256.0}) {
    const Matrix gm = fuse_class_tokens(p, 1, FusionKind::gem, power);
    CHECK(((gm.array() <= top.array() + 1e-12) && (gm.array() >= top.array() * std::pow(2.0, -1.0 / power) - 1e-12))
              .all());
    const double gap = max_abs_diff(gm, top);
    CHECK(gap < previous);
    previous = gap;
  }
  // Within 1e-3 of max at p=64 only when the group members are that close.
  Matrix close(2, 2);
  close << 1.0, 0.5, 0.999, 0.5005;
  CHECK(max_abs_diff(fuse_class_tokens(close, 1, FusionKind::gem, 64.0), Matrix{{1.0, 0.5005}}) < 1e-3);

  CHECK_THROWS_AS(fuse_class_tokens(Matrix::Ones(3, 2), 1, FusionKind::max), std::invalid_argument);
  CHECK_THROWS_AS(fuse_class_tokens(p, 1, FusionKind::gem, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(parse_fusion("median"), std::invalid_argument);
  for (FusionKind k : kAllKinds) CHECK(parse_fusion(to_string(k)) == k);
}

TEST_CASE("fusion properties on random inputs") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int level = trial % 3;
    const int group = 1 << level;
    const int rows = group * (1 + trial % 3);
    const Matrix x = positive_matrix(rows, 4, rng);
    // Shuffle rows within each group.
    Matrix shuffled = x;
    for (int start = 0; start < rows; start += group) {
      std::vector<int> order(static_cast<std::size_t>(group));
      std::iota(order.begin(), order.end(), start);
      std::shuffle(order.begin(), order.end(), rng);
      for (int i = 0; i < group; ++i) shuffled.row(start + i) = x.row(order[static_cast<std::size_t>(i)]);
    }
    const double p = std::uniform_real_distribution<double>(1.0, 8.0)(rng);
    for (FusionKind k : kAllKinds) {
      CHECK(max_abs_diff(fuse_class_tokens(x, level, k, p), fuse_class_tokens(shuffled, level, k, p)) < 1e-12);
    }
    const Matrix lo = fuse_class_tokens(x, level, FusionKind::min);
    const Matrix hi = fuse_class_tokens(x, level, FusionKind::max);
    const Matrix gm = fuse_class_tokens(x, level, FusionKind::gem, p);
    CHECK(((lo.array() <= gm.array() + 1e-12) && (gm.array() <= hi.array() + 1e-12)).all());

    // Groups of identical rows fuse to that row.
    Matrix same(rows, 4);
    for (int r = 0; r < rows; ++r) same.row(r) = x.row(r / group * group);
    for (FusionKind k : kAllKinds) {
      const Matrix f = fuse_class_tokens(same, level, k, p);
      for (int j = 0; j < rows / group; ++j) CHECK(max_abs_diff(f.row(j), x.row(j * group)) < 1e-12);
    }
  }
}

TEST_CASE("graph fusion matches the matrix version and its gradient") {
  std::mt19937_64 rng(5);
  const Matrix x = positive_matrix(4, 3, rng);
  for (FusionKind k : {FusionKind::min, FusionKind::max, FusionKind::avg}) {
    ag::Graph g;
    CHECK(g.value(fuse_class_tokens(g.input(x), 2, k)) == fuse_class_tokens(x, 2, k));
    CHECK(testing::fd_max_rel_error({x}, [k](ag::Graph&, const std::vector<ag::Var>& v) {
            return fuse_class_tokens(v[0], 1, k);
          }) < 1e-6);
  }
  CHECK(testing::fd_max_rel_error({x, Matrix::Constant(1, 1, 2.5)}, [](ag::Graph&, const std::vector<ag::Var>& v) {
          return fuse_class_tokens(v[0], 1, FusionKind::gem, v[1]);
        }) < 1e-6);
  ag::Graph g;
  CHECK_THROWS_AS(fuse_class_tokens(g.input(x), 1, FusionKind::gem), std::invalid_argument);
}

TEST_CASE("feature dimensions") {
  ModelConfig c;
  c.embed.embed_dim = 384;
  c.embed.num_class_tokens = 12;
  c.reduction = 4;
  c.branches = 3;
  CHECK(c.feature_dim() == 1152);
  CHECK(c.total_feature_dim() == 3456);
  CHECK(c.reduced_dim(0) == 96);
  CHECK(c.reduced_dim(1) == 192);
  CHECK(c.reduced_dim(2) == 384);
  c.reduction = 2;
  CHECK(c.total_feature_dim() == 6912);
  for (int g = 0; g < 3; ++g) CHECK(c.class_count(g) * c.reduced_dim(g) == c.feature_dim());
}

TEST_CASE("every branch of a valid config yields M*D/r dims") {
  std::mt19937_64 rng(6);
  for (int m : {2, 4, 8}) {
    for (int r : {1, 2, 4}) {
      for (int branches = 1; branches <= 3 && (m >> (branches - 1)) >= 1 && m % (1 << (branches - 1)) == 0;
           ++branches) {
        ModelConfig c = tiny_model_config(branches);
        c.embed.image_height = 24;
        c.embed.image_width = 12;
        c.embed.num_class_tokens = m;
        c.reduction = r;
        ReidModel model = ReidModel::init(c, 9);
        ag::Graph g;
        const auto f = sample_features(g, random_image(24, 12, rng), 0, model, Mode::eval);
        REQUIRE(f.size() == static_cast<std::size_t>(branches));
        for (auto v : f) {
          CHECK(g.value(v).rows() == 1);
          CHECK(g.value(v).cols() == m * 8 / r);
        }
      }
    }
  }
}

TEST_CASE("branch outputs have M/2^g class rows") {
  std::mt19937_64 rng(7);
  ModelConfig c = tiny_model_config(3);
  c.embed.image_height = 32;
  c.embed.image_width = 16;
  c.embed.num_class_tokens = 12;
  ReidModel model = ReidModel::init(c, 3);
  ag::Graph g;
  const Image img = random_image(32, 16, rng);
  TokenSequence z = assemble_sequence(g, patchify_project(g, img, model.embed, c.embed), model.embed, 1, c.embed);
  z = backbone_forward(z, model.trunk, c.depth - 2, Mode::eval, {});
  const int expected[] = {12, 6, 3};
  for (int b = 0; b < 3; ++b) {
    const Matrix first = g.value(branch_forward(z, model.branches[b], Mode::eval, {}, branch_block_id(c, b)));
    const Matrix again = g.value(branch_forward(z, model.branches[b], Mode::eval, {}, branch_block_id(c, b)));
    CHECK(first.rows() == expected[b]);
    CHECK(first == again);
  }
}

TEST_CASE("single branch equals a monolithic backbone pass") {
  std::mt19937_64 rng(8);
  ModelConfig c = tiny_model_config(1);
  c.depth = 4;
  ReidModel model = ReidModel::init(c, 5);
  const Image img = random_image(16, 8, rng);

  ag::Graph g;
  const Matrix features = g.value(sample_features(g, img, 1, model, Mode::eval).front());

  ag::Graph h;
  Backbone all = model.trunk;
  for (const BiMbBlock& b : model.branches[0].blocks.blocks) all.blocks.push_back(b);
  TokenSequence z = assemble_sequence(h, patchify_project(h, img, model.embed, c.embed), model.embed, 1, c.embed);
  z = backbone_forward(z, all, c.depth, Mode::eval, {});
  ag::Var rows = ag::gather_rows(z.data, z.layout.class_positions);
  CHECK(h.value(extract_branch_feature(rows, model.branches[0])) == features);
}

TEST_CASE("branch feature extraction") {
  std::mt19937_64 rng(9);
  ReidModel model = ReidModel::init(tiny_model_config(2), 1);
  Branch& b = model.branches[1];
  ag::Graph g;
  const Matrix f = g.value(extract_branch_feature(g.constant(random_matrix(1, 8, rng)), b));
  CHECK(f.cols() == 8);
  CHECK(std::abs(f.mean()) < 1e-12);
  CHECK_THROWS_AS(extract_branch_feature(g.constant(Matrix::Zero(1, 8)), b), std::domain_error);
  CHECK_THROWS_AS(extract_branch_feature(g.constant(random_matrix(2, 8, rng)), b), std::invalid_argument);
}

TEST_CASE("feature bundle") {
  std::mt19937_64 rng(10);
  ReidModel model = ReidModel::init(tiny_model_config(2), 2);
  const Image img = random_image(16, 8, rng);
  const FeatureBundle fb = model_forward({img, img}, {0, 0}, model, Mode::eval);
  REQUIRE(fb.features.size() == 2);
  for (int b = 0; b < 2; ++b) {
    CHECK(fb.features[b].rows() == 2);
    CHECK(fb.features[b].cols() == 8);
    CHECK(fb.logits[b].cols() == 3);
    CHECK(fb.features[b].row(0) == fb.features[b].row(1));
    CHECK(fb.logits[b].row(0) == fb.logits[b].row(1));
  }
  const FeatureBundle single = model_forward(img, model, 0, Mode::eval);
  CHECK(single.features[0] == fb.features[0].row(0));
  CHECK_THROWS_AS(model_forward({img}, {0, 1}, model, Mode::eval), std::invalid_argument);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny_model_config(2);
  c.embed.num_class_tokens = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_model_config(2);
  c.depth = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_model_config(2);
  c.embed.num_class_tokens = 8;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_model_config(2);
  c.reduction = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(tiny_model_config(2).validate());
}
