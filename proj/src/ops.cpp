#include "reidmamba/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace reidmamba::ag {
namespace {

Graph& graph_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("invalid variable");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  Graph& g = graph_of(a);
  if (b.graph != &g) throw std::invalid_argument("variables belong to different graphs");
  return g;
}

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = g.value(a);
  const Matrix& bv = g.value(b);
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(av) + " * " + shape_str(bv));
  }
  Matrix out = av * bv;
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.record(std::move(out), rg, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    if (g.requires_grad(a)) g.accumulate(a, go * g.value(b).transpose());
    if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * go);
  });
}

Var transpose(Var x) {
  Graph& g = graph_of(x);
  Matrix out = g.value(x).transpose();
  return g.record(std::move(out), g.requires_grad(x),
                  [x](Graph& g, const Matrix& go, const Matrix&) { g.accumulate(x, go.transpose()); });
}

Var linear(Var x, Var w) { return matmul(x, w); }

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = g.value(a);
  const Matrix& bv = g.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw std::invalid_argument("add shape mismatch: " + shape_str(av) + " + " + shape_str(bv));
  }
  Matrix out = av + bv;
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.record(std::move(out), rg, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = g.value(a);
  const Matrix& bv = g.value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub shape mismatch");
  Matrix out = av - bv;
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.record(std::move(out), rg, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, go);
    g.accumulate(b, -go);
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Matrix& av = g.value(a);
  const Matrix& bv = g.value(b);
  require(av.rows() == bv.rows() && av.cols() == bv.cols(), "mul shape mismatch");
  Matrix out = av.cwiseProduct(bv);
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.record(std::move(out), rg, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    if (g.requires_grad(a)) g.accumulate(a, go.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, go.cwiseProduct(g.value(a)));
  });
}

Var scale(Var x, double s) {
  Graph& g = graph_of(x);
  Matrix out = g.value(x) * s;
  return g.record(std::move(out), g.requires_grad(x),
                  [x, s](Graph& g, const Matrix& go, const Matrix&) { g.accumulate(x, go * s); });
}

Var add_row(Var x, Var row) {
  Graph& g = graph_of(x, row);
  const Matrix& xv = g.value(x);
  const Matrix& rv = g.value(row);
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw std::invalid_argument("add_row shape mismatch: " + shape_str(xv) + " + " + shape_str(rv));
  }
  Matrix out = xv.rowwise() + rv.row(0);
  const bool rg = g.requires_grad(x) || g.requires_grad(row);
  return g.record(std::move(out), rg, [x, row](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(x, go);
    if (g.requires_grad(row)) g.accumulate(row, go.colwise().sum());
  });
}

Var exp(Var x) {
  Graph& g = graph_of(x);
  Matrix out = g.value(x).array().exp().matrix();
  return g.record(std::move(out), g.requires_grad(x), [x](Graph& g, const Matrix& go, const Matrix& out) {
    g.accumulate(x, go.cwiseProduct(out));
  });
}

Var silu(Var x) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.size(); ++i) out.data()[i] = xv.data()[i] * sigmoid(xv.data()[i]);
  return g.record(std::move(out), g.requires_grad(x), [x](Graph& g, const Matrix& go, const Matrix&) {
    const Matrix& xv = g.value(x);
    Matrix d(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double s = sigmoid(v);
      d.data()[i] = go.data()[i] * s * (1.0 + v * (1.0 - s));
    }
    g.accumulate(x, d);
  });
}

Var softplus(Var x) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double v = xv.data()[i];
    out.data()[i] = v > 20.0 ? v : std::log1p(std::exp(v));
  }
  return g.record(std::move(out), g.requires_grad(x), [x](Graph& g, const Matrix& go, const Matrix&) {
    const Matrix& xv = g.value(x);
    Matrix d(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) d.data()[i] = go.data()[i] * sigmoid(xv.data()[i]);
    g.accumulate(x, d);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const Matrix& xv = g.value(x);
  const Matrix& gv = g.value(gamma);
  const Matrix& bv = g.value(beta);
  const Eigen::Index rows = xv.rows();
  const Eigen::Index cols = xv.cols();
  require(gv.rows() == 1 && gv.cols() == cols && bv.rows() == 1 && bv.cols() == cols,
          "layer_norm affine shape mismatch");
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
  const bool rg = g.requires_grad(x) || g.requires_grad(gamma) || g.requires_grad(beta);
  return g.record(std::move(out), rg,
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph& g, const Matrix& go, const Matrix&) {
                    if (g.requires_grad(gamma)) g.accumulate(gamma, go.cwiseProduct(xhat).colwise().sum());
                    if (g.requires_grad(beta)) g.accumulate(beta, go.colwise().sum());
                    if (!g.requires_grad(x)) return;
                    const Matrix& gv = g.value(gamma);
                    Matrix dx(go.rows(), go.cols());
                    for (Eigen::Index r = 0; r < go.rows(); ++r) {
                      Eigen::RowVectorXd dxhat = go.row(r).cwiseProduct(gv.row(0));
                      const double m1 = dxhat.mean();
                      const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) = (dxhat.array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                    }
                    g.accumulate(x, dx);
                  });
}

Var l2_normalize_rows(Var x) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  Eigen::VectorXd norms = xv.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0.0)) throw std::domain_error("cannot normalize a zero-norm row");
  }
  Matrix out = xv.array().colwise() / norms.array();
  return g.record(std::move(out), g.requires_grad(x),
                  [x, norms = std::move(norms)](Graph& g, const Matrix& go, const Matrix& y) {
                    Matrix dx(go.rows(), go.cols());
                    for (Eigen::Index r = 0; r < go.rows(); ++r) {
                      const double proj = y.row(r).dot(go.row(r));
                      dx.row(r) = (go.row(r) - y.row(r) * proj) / norms(r);
                    }
                    g.accumulate(x, dx);
                  });
}

Var gather_rows(Var x, std::vector<int> rows) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  Matrix out(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw std::out_of_range("gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]);
  }
  return g.record(std::move(out), g.requires_grad(x),
                  [x, rows = std::move(rows)](Graph& g, const Matrix& go, const Matrix&) {
                    const Matrix& xv = g.value(x);
                    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
                    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
                    g.accumulate(x, dx);
                  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows needs at least one part");
  Graph& g = graph_of(parts.front());
  const Eigen::Index cols = g.value(parts.front()).cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (Var p : parts) {
    graph_of(parts.front(), p);
    require(g.value(p).cols() == cols, "concat_rows column mismatch");
    rows += g.value(p).rows();
    rg = rg || g.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    const Matrix& pv = g.value(p);
    out.middleRows(at, pv.rows()) = pv;
    at += pv.rows();
  }
  return g.record(std::move(out), rg, [parts](Graph& g, const Matrix& go, const Matrix&) {
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index r = g.value(p).rows();
      if (g.requires_grad(p)) g.accumulate(p, go.middleRows(at, r));
      at += r;
    }
  });
}

Var reshape(Var x, int rows, int cols) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  require(rows >= 0 && cols >= 0 && static_cast<Eigen::Index>(rows) * cols == xv.size(), "reshape size mismatch");
  Matrix out = Eigen::Map<const Matrix>(xv.data(), rows, cols);
  const Eigen::Index r0 = xv.rows();
  const Eigen::Index c0 = xv.cols();
  return g.record(std::move(out), g.requires_grad(x), [x, r0, c0](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(x, Eigen::Map<const Matrix>(go.data(), r0, c0));
  });
}

Var flatten(Var x) {
  const Matrix& xv = graph_of(x).value(x);
  return reshape(x, 1, static_cast<int>(xv.size()));
}

Var pick(Var x, std::vector<std::pair<int, int>> entries) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  Matrix out(1, static_cast<Eigen::Index>(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [r, c] = entries[i];
    if (r < 0 || r >= xv.rows() || c < 0 || c >= xv.cols()) throw std::out_of_range("pick index out of range");
    out(0, static_cast<Eigen::Index>(i)) = xv(r, c);
  }
  return g.record(std::move(out), g.requires_grad(x),
                  [x, entries = std::move(entries)](Graph& g, const Matrix& go, const Matrix&) {
                    const Matrix& xv = g.value(x);
                    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
                    for (std::size_t i = 0; i < entries.size(); ++i) {
                      dx(entries[i].first, entries[i].second) += go(0, static_cast<Eigen::Index>(i));
                    }
                    g.accumulate(x, dx);
                  });
}

Var sum(Var x) {
  Graph& g = graph_of(x);
  Matrix out(1, 1);
  out(0, 0) = g.value(x).sum();
  return g.record(std::move(out), g.requires_grad(x), [x](Graph& g, const Matrix& go, const Matrix&) {
    const Matrix& xv = g.value(x);
    g.accumulate(x, Matrix::Constant(xv.rows(), xv.cols(), go(0, 0)));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(graph_of(x).value(x).size());
  require(n > 0, "mean of empty matrix");
  return scale(sum(x), 1.0 / n);
}

Var cosine_similarity(Var a, Var b) {
  Var an = l2_normalize_rows(a);
  Var bn = a.id == b.id ? an : l2_normalize_rows(b);
  return matmul(an, transpose(bn));
}

Var group_mean_rows(Var x, const std::vector<std::vector<int>>& groups) {
  Graph& g = graph_of(x);
  const Matrix& xv = g.value(x);
  Matrix out(static_cast<Eigen::Index>(groups.size()), xv.cols());
  for (std::size_t k = 0; k < groups.size(); ++k) {
    require(!groups[k].empty(), "group_mean_rows: empty group");
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(xv.cols());
    for (int r : groups[k]) {
      if (r < 0 || r >= xv.rows()) throw std::out_of_range("group_mean_rows index out of range");
      acc += xv.row(r);
    }
    out.row(static_cast<Eigen::Index>(k)) = acc / static_cast<double>(groups[k].size());
  }
  return g.record(std::move(out), g.requires_grad(x), [x, groups](Graph& g, const Matrix& go, const Matrix&) {
    const Matrix& xv = g.value(x);
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (std::size_t k = 0; k < groups.size(); ++k) {
      const double w = 1.0 / static_cast<double>(groups[k].size());
      for (int r : groups[k]) dx.row(r) += go.row(static_cast<Eigen::Index>(k)) * w;
    }
    g.accumulate(x, dx);
  });
}

Var causal_depthwise_conv(Var x, Var w, Var b) {
  Graph& g = graph_of(x, w);
  graph_of(x, b);
  const Matrix& xv = g.value(x);
  const Matrix& wv = g.value(w);
  const Matrix& bv = g.value(b);
  const Eigen::Index T = xv.rows();
  const Eigen::Index C = xv.cols();
  const Eigen::Index k = wv.cols();
  require(wv.rows() == C && k >= 1, "conv weight must be C x k");
  require(bv.rows() == 1 && bv.cols() == C, "conv bias must be 1 x C");
  Matrix out(T, C);
  for (Eigen::Index t = 0; t < T; ++t) {
    out.row(t) = bv.row(0);
    for (Eigen::Index j = 0; j < k; ++j) {
      const Eigen::Index src = t - (k - 1) + j;
      if (src < 0) continue;
      out.row(t).array() += wv.col(j).transpose().array() * xv.row(src).array();
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(w) || g.requires_grad(b);
  return g.record(std::move(out), rg, [x, w, b](Graph& g, const Matrix& go, const Matrix&) {
    const Matrix& xv = g.value(x);
    const Matrix& wv = g.value(w);
    const Eigen::Index T = xv.rows();
    const Eigen::Index C = xv.cols();
    const Eigen::Index k = wv.cols();
    Matrix dx = Matrix::Zero(T, C);
    Matrix dw = Matrix::Zero(C, k);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index src = t - (k - 1) + j;
        if (src < 0) continue;
        dx.row(src).array() += go.row(t).array() * wv.col(j).transpose().array();
        dw.col(j).array() += (go.row(t).array() * xv.row(src).array()).transpose();
      }
    }
    g.accumulate(x, dx);
    g.accumulate(w, dw);
    g.accumulate(b, go.colwise().sum());
  });
}

}  // namespace reidmamba::ag
