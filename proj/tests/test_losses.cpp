#include "reidmamba/losses.hpp"
#include "reidmamba/ranking.hpp"

#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace reidmamba;
using testing::fd_max_rel_error;
using testing::max_abs_diff;
using testing::random_matrix;

namespace {

std::vector<int> pk_labels(int p, int k) {
  std::vector<int> labels;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < k; ++j) labels.push_back(10 + 3 * i);
  }
  return labels;
}

double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

double row_value(ag::Graph& g, ag::Var v) { return g.value(v)(0, 0); }

// Distinct values whose pairwise gaps are at least `gap`, in random order.
std::vector<double> spaced_sequence(int n, double gap, std::mt19937_64& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  std::uniform_real_distribution<double> jitter(0.0, 0.25 * gap);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i * 1.5 * gap + jitter(rng);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

SimilarityView view_from(ag::Graph& g, const Matrix& pairwise, const Matrix& centroid, const std::vector<int>& labels) {
  return SimilarityView{g.constant(pairwise), g.constant(centroid), BatchStructure::from_labels(labels)};
}

}  // namespace

TEST_CASE("BNNeck") {
  std::mt19937_64 rng(1);
  BnNeckHead head = BnNeckHead::init("n", 4, 3, rng);
  SUBCASE("constant batch normalizes to zero before the affine map") {
    head.beta.value << 0.1, 0.2, 0.3, 0.4;
    ag::Graph g;
    const Matrix x = Matrix::Constant(5, 4, 2.5);
    const NeckOutput out = bnneck_apply(g.constant(x), head, Mode::train);
    for (Eigen::Index r = 0; r < 5; ++r) CHECK(g.value(out.bn_features).row(r) == head.beta.value.row(0));
  }
  SUBCASE("train mode standardizes columns and tracks running statistics") {
    const Matrix x = random_matrix(6, 4, rng, 2.0);
    ag::Graph g;
    const NeckOutput out = bnneck_apply(g.constant(x), head, Mode::train);
    for (int c = 0; c < 4; ++c) {
      const double mu = x.col(c).mean();
      const double var = (x.col(c).array() - mu).square().mean();
      for (int r = 0; r < 6; ++r) {
        CHECK(g.value(out.bn_features)(r, c) == doctest::Approx((x(r, c) - mu) / std::sqrt(var + 1e-5)).epsilon(1e-12));
      }
      CHECK(head.running_mean(0, c) == doctest::Approx(0.1 * mu).epsilon(1e-12));
      CHECK(head.running_var(0, c) == doctest::Approx(0.9 + 0.1 * var * 6.0 / 5.0).epsilon(1e-12));
    }
    CHECK(max_abs_diff(g.value(out.logits), g.value(out.bn_features) * head.classifier.value) < 1e-14);
  }
  SUBCASE("eval mode is deterministic and uses running statistics") {
    head.running_mean << 1, 2, 3, 4;
    head.running_var << 4, 4, 1, 1;
    const Matrix x = random_matrix(3, 4, rng);
    ag::Graph g;
    const Matrix a = g.value(bnneck_apply(g.constant(x), head, Mode::eval).bn_features);
    const Matrix b = g.value(bnneck_apply(g.constant(x), head, Mode::eval).bn_features);
    CHECK(a == b);
    CHECK(a(0, 0) == doctest::Approx((x(0, 0) - 1.0) / std::sqrt(4.0 + 1e-5)));
    CHECK(head.running_mean(0, 0) == 1.0);
  }
  SUBCASE("gradients") {
    head.gamma.value = random_matrix(1, 4, rng);
    CHECK(fd_max_rel_error({random_matrix(5, 4, rng)}, [&](ag::Graph&, const std::vector<ag::Var>& v) {
            return bnneck_apply(v[0], head, Mode::train).logits;
          }) < 1e-6);
  }
  SUBCASE("single row cannot be batch normalized") {
    ag::Graph g;
    CHECK_THROWS_AS(bnneck_apply(g.constant(Matrix::Ones(1, 4)), head, Mode::train), std::invalid_argument);
  }
}

TEST_CASE("ID loss") {
  ag::Graph g;
  for (double eps : {0.0, 0.1, 0.5}) {
    CHECK(row_value(g, id_loss(g.constant(Matrix::Constant(3, 7, 0.4)), {0, 3, 6}, eps)) ==
          doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  Matrix peaked = Matrix::Zero(2, 3);
  peaked(0, 1) = 60.0;
  peaked(1, 2) = 60.0;
  CHECK(row_value(g, id_loss(g.constant(peaked), {1, 2}, 0.0)) < 1e-20);

  // Hand computation for C = 3, eps = 0.1.
  Matrix z(2, 3);
  z << 1.0, 2.0, 0.5, -1.0, 0.0, 3.0;
  const std::vector<int> labels{0, 2};
  double expect = 0.0;
  for (int r = 0; r < 2; ++r) {
    const double norm = std::exp(z(r, 0)) + std::exp(z(r, 1)) + std::exp(z(r, 2));
    for (int c = 0; c < 3; ++c) {
      const double q = c == labels[static_cast<std::size_t>(r)] ? 0.9 : 0.05;
      expect -= q * std::log(std::exp(z(r, c)) / norm);
    }
  }
  CHECK(row_value(g, id_loss(g.constant(z), labels, 0.1)) == doctest::Approx(expect / 2.0).epsilon(1e-13));
  CHECK(fd_max_rel_error({z}, [&](ag::Graph&, const std::vector<ag::Var>& v) { return id_loss(v[0], labels, 0.1); }) <
        1e-7);
  CHECK_THROWS_AS(id_loss(g.constant(z), {0, 3}, 0.1), std::out_of_range);
  CHECK_THROWS_AS(id_loss(g.constant(z), {0}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(id_loss(g.constant(z), labels, 1.0), std::invalid_argument);
}

TEST_CASE("batch-hard triplet loss") {
  SUBCASE("identical features cost exactly the margin") {
    ag::Graph g;
    CHECK(row_value(g, batch_hard_triplet(g.constant(Matrix::Ones(4, 3)), pk_labels(2, 2), 1.2)) == 1.2);
  }
  SUBCASE("well separated clusters cost nothing and have zero gradient") {
    std::mt19937_64 rng(2);
    Matrix f = 0.01 * random_matrix(6, 2, rng);
    f.middleRows(3, 3).array() += 10.0;
    ag::Graph g;
    ag::Var x = g.input(f);
    ag::Var loss = batch_hard_triplet(x, {0, 0, 0, 1, 1, 1}, 1.2);
    CHECK(row_value(g, loss) == 0.0);
    g.backward(loss);
    CHECK(g.grad(x).isZero(0.0));
  }
  SUBCASE("P=2 K=2 matches exhaustive mining") {
    Matrix f(4, 2);
    f << 0.0, 0.0, 1.0, 0.5, 0.3, 0.2, 2.0, 1.0;
    const std::vector<int> labels{0, 0, 1, 1};
    double expect = 0.0;
    for (int a = 0; a < 4; ++a) {
      double worst = -INFINITY;
      for (int p = 0; p < 4; ++p) {
        for (int n = 0; n < 4; ++n) {
          if (p == a || labels[p] != labels[a] || labels[n] == labels[a]) continue;
          worst = std::max(worst, (f.row(a) - f.row(p)).norm() - (f.row(a) - f.row(n)).norm() + 1.2);
        }
      }
      expect += std::max(0.0, worst);
    }
    ag::Graph g;
    CHECK(row_value(g, batch_hard_triplet(g.constant(f), labels, 1.2)) == doctest::Approx(expect / 4.0).epsilon(1e-14));
  }
  SUBCASE("gradient in a non-degenerate region") {
    std::mt19937_64 rng(3);
    const Matrix f = random_matrix(6, 3, rng);
    CHECK(fd_max_rel_error({f}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return batch_hard_triplet(v[0], {0, 0, 1, 1, 2, 2}, 10.0);
          }) < 1e-6);
  }
  SUBCASE("needs two identities with two instances each") {
    ag::Graph g;
    CHECK_THROWS_AS(batch_hard_triplet(g.constant(Matrix::Ones(3, 2)), {0, 0, 0}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(batch_hard_triplet(g.constant(Matrix::Ones(3, 2)), {0, 0, 1}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("cosine similarity matrix") {
  ag::Graph g;
  Matrix same(3, 2);
  same << 1, 2, 1, 2, 1, 2;
  CHECK(max_abs_diff(g.value(cosine_similarity_matrix(g.constant(same))), Matrix::Ones(3, 3)) < 1e-15);
  CHECK(max_abs_diff(g.value(cosine_similarity_matrix(g.constant(3.0 * Matrix::Identity(4, 4)))),
                     Matrix::Identity(4, 4)) < 1e-15);
  std::mt19937_64 rng(4);
  const Matrix f = random_matrix(6, 4, rng);
  const Matrix s = g.value(cosine_similarity_matrix(g.constant(f)));
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) CHECK(std::abs(s(i, j) - cosine(f.row(i), f.row(j))) < 1e-12);
  }
}

TEST_CASE("differentiable Kendall tau") {
  std::mt19937_64 rng(5);
  SUBCASE("constant x gives zero") {
    const std::vector<double> x(5, 0.3);
    const std::vector<double> y{1, 5, 2, 4, 3};
    CHECK(dktau(x, y, 0.1) == 0.0);
  }
  SUBCASE("saturated agreement and reversal") {
    const double tau = 0.05;
    const std::vector<double> x = spaced_sequence(8, 20 * tau, rng);
    CHECK(dktau(x, x, tau) == doctest::Approx(1.0).epsilon(1e-6));
    std::vector<double> down(x.size());
    std::transform(x.begin(), x.end(), down.begin(), [](double v) { return 3.0 - 2.0 * v; });
    CHECK(dktau(x, down, tau) == doctest::Approx(-dktau(x, x, tau)).epsilon(1e-6));
  }
  SUBCASE("small tau recovers the exact statistic") {
    for (int trial = 0; trial < 200; ++trial) {
      const int b = 2 + trial % 11;
      const std::vector<double> x = spaced_sequence(b, 0.01, rng);
      const std::vector<double> y = spaced_sequence(b, 0.01, rng);
      CHECK(std::abs(dktau(x, y, 1e-4) - ktau_exact(x, y)) < 1e-3);
      CHECK(std::abs(dktau(x, y, 0.01 / 20) - ktau_exact(x, y)) < 1e-3);
    }
  }
  SUBCASE("bounded, symmetric and shift invariant") {
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
      const int b = 2 + trial % 15;
      std::vector<double> x(static_cast<std::size_t>(b)), y(static_cast<std::size_t>(b));
      for (int i = 0; i < b; ++i) {
        x[static_cast<std::size_t>(i)] = n(rng);
        y[static_cast<std::size_t>(i)] = n(rng);
      }
      const double tau = std::uniform_real_distribution<double>(0.01, 2.0)(rng);
      const double v = dktau(x, y, tau);
      CHECK(std::abs(v) <= 1.0);
      CHECK(v == dktau(y, x, tau));
      std::vector<double> shifted = x;
      for (double& s : shifted) s += 0.75;
      CHECK(std::abs(dktau(shifted, y, tau) - v) < 1e-12);
    }
  }
  SUBCASE("graph value and gradient") {
    const Matrix x = random_matrix(1, 6, rng);
    const Matrix y = random_matrix(1, 6, rng);
    ag::Graph g;
    const double value = row_value(g, dktau(g.constant(x), g.constant(y), 0.3));
    CHECK(value == dktau(std::span<const double>(x.data(), 6), std::span<const double>(y.data(), 6), 0.3));
    CHECK(fd_max_rel_error({x, y}, [](ag::Graph&, const std::vector<ag::Var>& v) { return dktau(v[0], v[1], 0.3); }) <
          1e-7);
  }
  SUBCASE("errors") {
    const std::vector<double> one{1.0};
    const std::vector<double> two{1.0, 2.0};
    CHECK_THROWS_AS(dktau(one, one, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(dktau(two, one, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(dktau(two, two, 0.0), std::invalid_argument);
  }
}

TEST_CASE("negative class centroids") {
  std::mt19937_64 rng(6);
  SUBCASE("P=2 gives a single entry") {
    ag::Graph g;
    const SimilarityView v = build_similarity_view(g.constant(random_matrix(4, 3, rng)), BatchStructure::from_labels({0, 0, 1, 1}));
    CHECK(g.value(negative_centroid_similarities(v, 0)).cols() == 1);
  }
  SUBCASE("identical members make the centroid equal to the member") {
    Matrix f = random_matrix(4, 3, rng);
    f.row(3) = f.row(2);
    ag::Graph g;
    const SimilarityView v = build_similarity_view(g.constant(f), BatchStructure::from_labels({0, 0, 1, 1}));
    CHECK(std::abs(g.value(negative_centroid_similarities(v, 0))(0, 0) - g.value(v.similarity)(0, 2)) < 1e-14);
  }
  SUBCASE("P=3 K=2 against mean-then-cosine") {
    const Matrix f = random_matrix(6, 4, rng);
    const std::vector<int> labels{7, 2, 7, 5, 2, 5};  // classes sorted: 2, 5, 7
    ag::Graph g;
    const SimilarityView v = build_similarity_view(g.constant(f), BatchStructure::from_labels(labels));
    const Eigen::RowVectorXd c2 = 0.5 * (f.row(1) + f.row(4));
    const Eigen::RowVectorXd c5 = 0.5 * (f.row(3) + f.row(5));
    const Eigen::RowVectorXd c7 = 0.5 * (f.row(0) + f.row(2));
    const Matrix s0 = g.value(negative_centroid_similarities(v, 0));
    CHECK(std::abs(s0(0, 0) - cosine(f.row(0), c2)) < 1e-14);
    CHECK(std::abs(s0(0, 1) - cosine(f.row(0), c5)) < 1e-14);
    const Matrix s3 = g.value(negative_centroid_similarities(v, 3));
    CHECK(std::abs(s3(0, 0) - cosine(f.row(3), c2)) < 1e-14);
    CHECK(std::abs(s3(0, 1) - cosine(f.row(3), c7)) < 1e-14);
    CHECK(v.positives(3) == std::vector<int>{5});
  }
  SUBCASE("unbalanced batches are rejected") {
    CHECK_THROWS_AS(BatchStructure::from_labels({0, 0, 1}), std::invalid_argument);
  }
}

TEST_CASE("ranking-aware triplet regularization") {
  std::mt19937_64 rng(7);
  const RatrConfig cfg{0.1, 1.0};

  SUBCASE("a single branch has no pairs") {
    ag::Graph g;
    std::vector<SimilarityView> views{build_similarity_view(g.constant(random_matrix(6, 3, rng)),
                                                            BatchStructure::from_labels(pk_labels(3, 2)))};
    CHECK(row_value(g, ratr_intra(views, cfg)) == 0.0);
    CHECK(row_value(g, ratr_inter(views, cfg)) == 0.0);
    CHECK(row_value(g, ratr(views, cfg)) == 0.0);
  }
  SUBCASE("identical and reversed branches in the saturated regime") {
    // P=4, K=3: hand-built similarities with gaps of at least 20 tau.
    const std::vector<int> labels = pk_labels(4, 3);
    Matrix pairwise(12, 12), centroid(12, 4);
    for (int i = 0; i < 12; ++i) {
      for (int j = 0; j < 12; ++j) pairwise(i, j) = 0.01 * ((i * 5 + j * 7) % 13) + 2.0 * j;
      for (int c = 0; c < 4; ++c) centroid(i, c) = 2.0 * c + 0.1 * i;
    }
    ag::Graph g;
    std::vector<SimilarityView> same{view_from(g, pairwise, centroid, labels), view_from(g, pairwise, centroid, labels)};
    CHECK(row_value(g, ratr_intra(same, cfg)) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(row_value(g, ratr_inter(same, cfg)) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(row_value(g, ratr(same, cfg)) == doctest::Approx(2.0).epsilon(1e-6));
    std::vector<SimilarityView> flipped{view_from(g, pairwise, centroid, labels),
                                        view_from(g, pairwise, -centroid, labels)};
    CHECK(row_value(g, ratr_inter(flipped, cfg)) == doctest::Approx(-1.0).epsilon(1e-6));
  }
  SUBCASE("intra term against a direct double sum, G=2 P=2 K=3") {
    const std::vector<int> labels = pk_labels(2, 3);
    const Matrix f0 = random_matrix(6, 4, rng);
    const Matrix f1 = random_matrix(6, 4, rng);
    ag::Graph g;
    const BatchStructure batch = BatchStructure::from_labels(labels);
    std::vector<SimilarityView> views{build_similarity_view(g.constant(f0), batch),
                                      build_similarity_view(g.constant(f1), batch)};
    double expect = 0.0;
    for (int k = 0; k < 6; ++k) {
      std::vector<double> a, b;
      for (int j = 0; j < 6; ++j) {
        if (j == k || labels[j] != labels[k]) continue;
        a.push_back(cosine(f0.row(k), f0.row(j)));
        b.push_back(cosine(f1.row(k), f1.row(j)));
      }
      double pair_sum = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = i + 1; j < a.size(); ++j) {
          pair_sum += std::tanh((a[i] - a[j]) / 0.1) * std::tanh((b[i] - b[j]) / 0.1);
        }
      }
      expect += pair_sum / (a.size() * (a.size() - 1) / 2.0);
    }
    CHECK(row_value(g, ratr_intra(views, cfg)) == doctest::Approx(expect / 6.0).epsilon(1e-12));
    CHECK_THROWS_AS(ratr_inter(views, cfg), std::invalid_argument);
  }
  SUBCASE("inter term against brute force, G=2 P=4 K=2, and the sum") {
    const std::vector<int> labels = pk_labels(4, 2);
    std::vector<Matrix> feats{random_matrix(8, 5, rng), random_matrix(8, 5, rng)};
    ag::Graph g;
    const BatchStructure batch = BatchStructure::from_labels(labels);
    std::vector<SimilarityView> views;
    for (const Matrix& f : feats) views.push_back(build_similarity_view(g.constant(f), batch));
    double expect = 0.0;
    for (int k = 0; k < 8; ++k) {
      std::vector<std::vector<double>> seq(2);
      for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 4; ++c) {
          if (c == k / 2) continue;
          const Eigen::RowVectorXd centroid = 0.5 * (feats[b].row(2 * c) + feats[b].row(2 * c + 1));
          seq[b].push_back(cosine(feats[b].row(k), centroid));
        }
      }
      double s = 0.0;
      for (int i = 0; i < 3; ++i) {
        for (int j = i + 1; j < 3; ++j) {
          s += std::tanh((seq[0][i] - seq[0][j]) / 0.1) * std::tanh((seq[1][i] - seq[1][j]) / 0.1);
        }
      }
      expect += s / 3.0;
    }
    CHECK(row_value(g, ratr_inter(views, cfg)) == doctest::Approx(expect / 8.0).epsilon(1e-12));
    // K=2 leaves one positive per anchor: nothing to rank.
    CHECK(row_value(g, ratr_intra(views, cfg)) == 0.0);
    CHECK(row_value(g, ratr(views, cfg)) ==
          doctest::Approx(row_value(g, ratr_intra(views, cfg)) + row_value(g, ratr_inter(views, cfg))).epsilon(1e-15));
  }
  SUBCASE("three branches average over all pairs") {
    const std::vector<int> labels = pk_labels(3, 3);
    const BatchStructure batch = BatchStructure::from_labels(labels);
    std::vector<Matrix> feats{random_matrix(9, 4, rng), random_matrix(9, 4, rng), random_matrix(9, 4, rng)};
    ag::Graph g;
    std::vector<SimilarityView> all;
    for (const Matrix& f : feats) all.push_back(build_similarity_view(g.constant(f), batch));
    double pairs = 0.0;
    for (int i = 0; i < 3; ++i) {
      for (int j = i + 1; j < 3; ++j) pairs += row_value(g, ratr(std::vector<SimilarityView>{all[i], all[j]}, cfg));
    }
    CHECK(row_value(g, ratr(all, cfg)) == doctest::Approx(pairs / 3.0).epsilon(1e-12));
  }
  SUBCASE("gradient with respect to branch features, G=2 P=3 K=3") {
    const std::vector<int> labels = pk_labels(3, 3);
    const BatchStructure batch = BatchStructure::from_labels(labels);
    const RatrConfig smooth{0.5, 1.0};
    CHECK(fd_max_rel_error({random_matrix(9, 4, rng), random_matrix(9, 4, rng)},
                           [&](ag::Graph&, const std::vector<ag::Var>& v) {
                             return ratr({build_similarity_view(v[0], batch), build_similarity_view(v[1], batch)},
                                         smooth);
                           }) < 1e-6);
  }
}

TEST_CASE("total loss") {
  std::mt19937_64 rng(8);
  std::vector<BnNeckHead> heads;
  for (int b = 0; b < 2; ++b) heads.push_back(BnNeckHead::init("h" + std::to_string(b), 4, 40, rng));
  const std::vector<int> classes{0, 0, 0, 1, 1, 1, 2, 2, 2};
  std::vector<Matrix> feats{random_matrix(9, 4, rng), random_matrix(9, 4, rng)};
  LossConfig cfg;
  cfg.ratr.tau = 0.3;

  auto compute = [&](int branches, double rho, ag::Graph& g) {
    cfg.ratr.rho = rho;
    std::vector<ag::Var> f;
    std::vector<NeckOutput> necks;
    for (int b = 0; b < branches; ++b) {
      f.push_back(g.constant(feats[b]));
      necks.push_back(bnneck_apply(f.back(), heads[b], Mode::eval));
    }
    return total_loss(f, necks, classes, cfg);
  };

  ag::Graph g;
  double supervised = 0.0;
  for (int b = 0; b < 2; ++b) {
    ag::Var fb = g.constant(feats[b]);
    supervised += row_value(g, id_loss(bnneck_apply(fb, heads[b], Mode::eval).logits, classes, cfg.smoothing)) +
                  row_value(g, batch_hard_triplet(fb, classes, cfg.margin));
  }
  const BatchStructure batch = BatchStructure::from_labels(classes);
  const double reg = row_value(g, ratr({build_similarity_view(g.constant(feats[0]), batch),
                                        build_similarity_view(g.constant(feats[1]), batch)},
                                       RatrConfig{0.3, 1.0}));

  const TotalLoss zero = compute(2, 0.0, g);
  CHECK(zero.breakdown.total == doctest::Approx(supervised / 2.0).epsilon(1e-13));
  CHECK(zero.breakdown.ratr_intra + zero.breakdown.ratr_inter == doctest::Approx(reg).epsilon(1e-13));

  const TotalLoss full = compute(2, 0.7, g);
  CHECK(full.breakdown.total == doctest::Approx(supervised / 2.0 + 0.7 * reg).epsilon(1e-13));
  CHECK(full.breakdown.id_per_branch.size() == 2);
  CHECK(full.breakdown.finite());
  CHECK(full.breakdown.records().size() == 9);

  const TotalLoss single = compute(1, 0.0, g);
  ag::Var f0 = g.constant(feats[0]);
  const double baseline = row_value(g, id_loss(bnneck_apply(f0, heads[0], Mode::eval).logits, classes, cfg.smoothing)) +
                          row_value(g, batch_hard_triplet(f0, classes, cfg.margin));
  CHECK(single.breakdown.total == baseline);
  CHECK(single.breakdown.ratr_intra == 0.0);
}
