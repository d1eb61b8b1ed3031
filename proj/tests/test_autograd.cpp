#include "support.hpp"

#include <doctest.h>

using namespace reidmamba;
using testing::fd_max_rel_error;
using testing::random_matrix;

TEST_CASE("constants carry no gradient and params share one node") {
  ag::Graph g;
  Parameter p("p", Matrix::Ones(2, 2));
  ag::Var a = g.param(p);
  ag::Var b = g.param(p);
  CHECK(a.id == b.id);
  ag::Var c = g.constant(Matrix::Ones(2, 2));
  CHECK_FALSE(g.requires_grad(c));
  ag::Var loss = ag::sum(ag::mul(ag::add(a, b), c));
  g.backward(loss);
  g.flush_parameter_grads();
  CHECK(p.grad.isApprox(Matrix::Constant(2, 2, 2.0)));
  CHECK(g.grad(c).isZero(0.0));
}

TEST_CASE("backward rejects non-scalar roots without a seed") {
  ag::Graph g;
  ag::Var x = g.input(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
  g.backward(x, Matrix::Ones(2, 3));
  CHECK(g.grad(x).isApprox(Matrix::Ones(2, 3)));
}

TEST_CASE("shape violations are rejected when an op is recorded") {
  ag::Graph g;
  ag::Var a = g.input(Matrix::Ones(2, 3));
  ag::Var b = g.input(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(ag::matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(ag::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::reshape(a, 4, 2), std::invalid_argument);
}

TEST_CASE("forward values of elementwise ops") {
  ag::Graph g;
  Matrix v(1, 4);
  v << -30.0, -1.0, 0.0, 25.0;
  ag::Var x = g.input(v);
  const Matrix sp = g.value(ag::softplus(x));
  CHECK(sp(0, 0) == doctest::Approx(std::log1p(std::exp(-30.0))).epsilon(1e-12));
  CHECK(sp(0, 2) == doctest::Approx(std::log(2.0)));
  CHECK(sp(0, 3) == doctest::Approx(25.0).epsilon(1e-10));
  const Matrix si = g.value(ag::silu(x));
  CHECK(si(0, 1) == doctest::Approx(-1.0 / (1.0 + std::exp(1.0))));
  CHECK(si(0, 2) == 0.0);
}

TEST_CASE("layer norm standardizes rows before the affine map") {
  std::mt19937_64 rng(3);
  ag::Graph g;
  ag::Var x = g.input(random_matrix(5, 7, rng, 3.0));
  ag::Var y = ag::layer_norm(x, g.constant(Matrix::Ones(1, 7)), g.constant(Matrix::Zero(1, 7)));
  const Matrix& out = g.value(y);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    CHECK(std::abs(out.row(r).mean()) < 1e-12);
    const double var = (out.row(r).array() - out.row(r).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("causal depthwise conv matches a direct loop and ignores the future") {
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(6, 3, rng);
  const Matrix w = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(1, 3, rng);
  ag::Graph g;
  const Matrix y = g.value(ag::causal_depthwise_conv(g.input(x), g.input(w), g.input(b)));
  for (int t = 0; t < 6; ++t) {
    for (int c = 0; c < 3; ++c) {
      double acc = b(0, c);
      for (int j = 0; j < 4; ++j) {
        const int src = t - 3 + j;
        if (src >= 0) acc += w(c, j) * x(src, c);
      }
      CHECK(y(t, c) == doctest::Approx(acc).epsilon(1e-14));
    }
  }
  Matrix changed = x;
  changed.row(5).setConstant(100.0);
  ag::Graph g2;
  const Matrix y2 = g2.value(ag::causal_depthwise_conv(g2.input(changed), g2.input(w), g2.input(b)));
  CHECK(y2.topRows(5) == y.topRows(5));
}

TEST_CASE("finite differences agree with every op's backward") {
  std::mt19937_64 rng(11);
  const double tol = 1e-6;
  SUBCASE("matmul / transpose / linear") {
    CHECK(fd_max_rel_error({random_matrix(3, 4, rng), random_matrix(4, 2, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::matmul(v[0], v[1]); }) < tol);
    CHECK(fd_max_rel_error({random_matrix(3, 4, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::transpose(v[0]); }) < tol);
    CHECK(fd_max_rel_error({random_matrix(3, 4, rng), random_matrix(4, 2, rng), random_matrix(1, 2, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::linear(v[0], v[1], v[2]); }) <
          tol);
  }
  SUBCASE("elementwise") {
    const Matrix a = random_matrix(3, 3, rng);
    const Matrix b = random_matrix(3, 3, rng);
    CHECK(fd_max_rel_error({a, b}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::sub(v[0], v[1]); }) <
          tol);
    CHECK(fd_max_rel_error({a, b}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::mul(v[0], v[1]); }) <
          tol);
    CHECK(fd_max_rel_error({a}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::exp(v[0]); }) < tol);
    CHECK(fd_max_rel_error({a}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::silu(v[0]); }) < tol);
    CHECK(fd_max_rel_error({a}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::softplus(v[0]); }) <
          tol);
    CHECK(fd_max_rel_error({a, random_matrix(1, 3, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::add_row(v[0], v[1]); }) < tol);
  }
  SUBCASE("normalizations") {
    CHECK(fd_max_rel_error({random_matrix(4, 6, rng, 2.0), random_matrix(1, 6, rng), random_matrix(1, 6, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) {
                             return ag::layer_norm(v[0], v[1], v[2]);
                           }) < 1e-5);
    CHECK(fd_max_rel_error({random_matrix(4, 6, rng)}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return ag::l2_normalize_rows(v[0]);
          }) < tol);
    CHECK(fd_max_rel_error({random_matrix(5, 4, rng), random_matrix(3, 4, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) {
                             return ag::cosine_similarity(v[0], v[1]);
                           }) < tol);
    CHECK(fd_max_rel_error({random_matrix(5, 4, rng)}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return ag::cosine_similarity(v[0], v[0]);
          }) < tol);
  }
  SUBCASE("indexing and reshaping") {
    const Matrix x = random_matrix(5, 3, rng);
    CHECK(fd_max_rel_error({x}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return ag::gather_rows(v[0], {4, 0, 0, 2});
          }) < tol);
    CHECK(fd_max_rel_error({x, random_matrix(2, 3, rng)}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return ag::concat_rows({v[1], v[0], v[1]});
          }) < tol);
    CHECK(fd_max_rel_error({x}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::reshape(v[0], 3, 5); }) <
          tol);
    CHECK(fd_max_rel_error({x}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return ag::pick(v[0], {{0, 1}, {4, 2}, {0, 1}});
          }) < tol);
    CHECK(fd_max_rel_error({x}, [](ag::Graph&, const std::vector<ag::Var>& v) { return ag::mean(v[0]); }) < tol);
    CHECK(fd_max_rel_error({x}, [](ag::Graph&, const std::vector<ag::Var>& v) {
            return ag::group_mean_rows(v[0], {{0, 3}, {1, 2, 4}});
          }) < tol);
  }
  SUBCASE("causal conv") {
    CHECK(fd_max_rel_error({random_matrix(7, 3, rng), random_matrix(3, 4, rng), random_matrix(1, 3, rng)},
                           [](ag::Graph&, const std::vector<ag::Var>& v) {
                             return ag::causal_depthwise_conv(v[0], v[1], v[2]);
                           }) < tol);
  }
}

TEST_CASE("l2 normalization rejects zero rows") {
  ag::Graph g;
  CHECK_THROWS_AS(ag::l2_normalize_rows(g.input(Matrix::Zero(2, 3))), std::domain_error);
}
