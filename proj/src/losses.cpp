#include "reidmamba/losses.hpp"

#include "reidmamba/init.hpp"
#include "reidmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace reidmamba {
namespace {

ag::Var zero_scalar(ag::Graph& g) { return g.constant(Matrix::Zero(1, 1)); }

double pair_count(int b) { return 0.5 * static_cast<double>(b) * static_cast<double>(b - 1); }

ag::Var sum_terms(ag::Graph& g, const std::vector<ag::Var>& terms) {
  if (terms.empty()) return zero_scalar(g);
  ag::Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
  return acc;
}

void check_labels(const Matrix& rows, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != rows.rows()) {
    throw std::invalid_argument("label count does not match batch rows");
  }
}

}  // namespace

BnNeckHead BnNeckHead::init(const std::string& prefix, int dim, int num_classes, std::mt19937_64& rng) {
  if (dim < 1 || num_classes < 2) throw std::invalid_argument("BNNeck needs dim >= 1 and >= 2 classes");
  BnNeckHead h;
  h.dim = dim;
  h.num_classes = num_classes;
  h.gamma = Parameter(prefix + ".bn_gamma", Matrix::Ones(1, dim));
  h.beta = Parameter(prefix + ".bn_beta", Matrix::Zero(1, dim));
  h.classifier = Parameter(prefix + ".classifier", init::normal(dim, num_classes, 0.001, rng));
  h.running_mean = Matrix::Zero(1, dim);
  h.running_var = Matrix::Ones(1, dim);
  return h;
}

NeckOutput bnneck_apply(ag::Var f, BnNeckHead& head, Mode mode) {
  ag::Graph& g = *f.graph;
  const Matrix& x = g.value(f);
  if (x.cols() != head.dim) throw std::invalid_argument("feature dim does not match BNNeck head");
  const Eigen::Index rows = x.rows();
  ag::Var normalized;
  if (mode == Mode::train) {
    if (rows < 2) throw std::invalid_argument("train-mode batch norm needs at least 2 rows");
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Matrix centered = x.rowwise() - mu;
    const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    const Eigen::RowVectorXd inv_std = (var.array() + head.eps).rsqrt();
    Matrix xhat = centered.array().rowwise() * inv_std.array();
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    head.running_mean = (1.0 - head.momentum) * head.running_mean + head.momentum * mu;
    head.running_var = (1.0 - head.momentum) * head.running_var + head.momentum * (var * unbias);
    Matrix xhat_copy = xhat;
    normalized = g.record(std::move(xhat), g.requires_grad(f),
                          [f, xhat = std::move(xhat_copy), inv_std](ag::Graph& g, const Matrix& go, const Matrix&) {
                            const double n = static_cast<double>(go.rows());
                            const Eigen::RowVectorXd s1 = go.colwise().sum();
                            const Eigen::RowVectorXd s2 = go.cwiseProduct(xhat).colwise().sum();
                            Matrix dx = ((go.array() * n).rowwise() - s1.array() -
                                         xhat.array().rowwise() * s2.array())
                                            .rowwise() *
                                        (inv_std.array() / n);
                            g.accumulate(f, dx);
                          });
  } else {
    const Eigen::RowVectorXd inv_std = (head.running_var.array() + head.eps).rsqrt();
    Matrix xhat = (x.rowwise() - head.running_mean.row(0)).array().rowwise() * inv_std.array();
    normalized = g.record(std::move(xhat), g.requires_grad(f),
                          [f, inv_std](ag::Graph& g, const Matrix& go, const Matrix&) {
                            g.accumulate(f, (go.array().rowwise() * inv_std.array()).matrix());
                          });
  }
  ag::Var gamma = g.param(head.gamma);
  ag::Var scaled = g.record(Matrix(g.value(normalized).array().rowwise() * g.value(gamma).row(0).array()),
                            true, [normalized, gamma](ag::Graph& g, const Matrix& go, const Matrix&) {
                              g.accumulate(normalized, (go.array().rowwise() * g.value(gamma).row(0).array()).matrix());
                              g.accumulate(gamma, go.cwiseProduct(g.value(normalized)).colwise().sum());
                            });
  ag::Var bn = ag::add_row(scaled, g.param(head.beta));
  ag::Var logits = ag::matmul(bn, g.param(head.classifier));
  return NeckOutput{bn, logits};
}

ag::Var id_loss(ag::Var logits, const std::vector<int>& labels, double smoothing) {
  ag::Graph& g = *logits.graph;
  const Matrix& z = g.value(logits);
  check_labels(z, labels);
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw std::invalid_argument("label smoothing must be in [0, 1)");
  const Eigen::Index rows = z.rows();
  const Eigen::Index classes = z.cols();
  if (classes < 2) throw std::invalid_argument("id loss needs at least 2 classes");
  Matrix target = Matrix::Constant(rows, classes, smoothing / static_cast<double>(classes - 1));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) throw std::out_of_range("label " + std::to_string(y) + " out of range");
    target(r, y) = 1.0 - smoothing;
  }
  Matrix prob(rows, classes);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double m = z.row(r).maxCoeff();
    const Eigen::RowVectorXd shifted = z.row(r).array() - m;
    const double lse = std::log(shifted.array().exp().sum());
    const Eigen::RowVectorXd logp = shifted.array() - lse;
    prob.row(r) = logp.array().exp();
    loss -= target.row(r).dot(logp);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(rows);
  return g.record(std::move(out), g.requires_grad(logits),
                  [logits, prob = std::move(prob), target = std::move(target)](ag::Graph& g, const Matrix& go,
                                                                               const Matrix&) {
                    g.accumulate(logits, (prob - target) * (go(0, 0) / static_cast<double>(prob.rows())));
                  });
}

ag::Var batch_hard_triplet(ag::Var f, const std::vector<int>& labels, double margin) {
  ag::Graph& g = *f.graph;
  const Matrix& x = g.value(f);
  check_labels(x, labels);
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw std::invalid_argument("triplet loss needs at least 2 identities");
  for (const auto& [label, count] : counts) {
    if (count < 2) throw std::invalid_argument("identity " + std::to_string(label) + " has fewer than 2 instances");
  }
  const Eigen::Index n = x.rows();
  Matrix dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) dist(i, j) = dist(j, i) = (x.row(i) - x.row(j)).norm();
  }
  struct Active {
    Eigen::Index anchor, pos, neg;
  };
  std::vector<Active> active;
  double loss = 0.0;
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index pos = -1;
    Eigen::Index neg = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    const double hinge = dist(a, pos) - dist(a, neg) + margin;
    if (hinge > 0.0) {
      loss += hinge;
      active.push_back({a, pos, neg});
    }
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);
  return g.record(std::move(out), g.requires_grad(f),
                  [f, active = std::move(active), dist = std::move(dist)](ag::Graph& g, const Matrix& go,
                                                                          const Matrix&) {
                    const Matrix& x = g.value(f);
                    Matrix dx = Matrix::Zero(x.rows(), x.cols());
                    const double w = go(0, 0) / static_cast<double>(x.rows());
                    for (const Active& t : active) {
                      if (dist(t.anchor, t.pos) > 0.0) {
                        const Eigen::RowVectorXd u = (x.row(t.anchor) - x.row(t.pos)) / dist(t.anchor, t.pos);
                        dx.row(t.anchor) += w * u;
                        dx.row(t.pos) -= w * u;
                      }
                      if (dist(t.anchor, t.neg) > 0.0) {
                        const Eigen::RowVectorXd u = (x.row(t.anchor) - x.row(t.neg)) / dist(t.anchor, t.neg);
                        dx.row(t.anchor) -= w * u;
                        dx.row(t.neg) += w * u;
                      }
                    }
                    g.accumulate(f, dx);
                  });
}

ag::Var cosine_similarity_matrix(ag::Var f) { return ag::cosine_similarity(f, f); }

double dktau(std::span<const double> x, std::span<const double> y, double tau) {
  if (x.size() != y.size()) throw std::invalid_argument("dktau sequences differ in length");
  if (x.size() < 2) throw std::invalid_argument("dktau needs sequences of length >= 2");
  if (!(tau > 0.0)) throw std::invalid_argument("dktau needs tau > 0");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) acc += std::tanh((x[i] - x[j]) / tau) * std::tanh((y[i] - y[j]) / tau);
  }
  return acc / pair_count(static_cast<int>(x.size()));
}

ag::Var dktau(ag::Var x, ag::Var y, double tau) {
  ag::Graph& g = *x.graph;
  const Matrix& xv = g.value(x);
  const Matrix& yv = g.value(y);
  if (xv.rows() != 1 || yv.rows() != 1) throw std::invalid_argument("dktau expects 1 x B rows");
  Matrix out(1, 1);
  out(0, 0) = dktau(std::span<const double>(xv.data(), static_cast<std::size_t>(xv.cols())),
                    std::span<const double>(yv.data(), static_cast<std::size_t>(yv.cols())), tau);
  const bool rg = g.requires_grad(x) || g.requires_grad(y);
  return g.record(std::move(out), rg, [x, y, tau](ag::Graph& g, const Matrix& go, const Matrix&) {
    const Matrix& xv = g.value(x);
    const Matrix& yv = g.value(y);
    const Eigen::Index b = xv.cols();
    Matrix gx = Matrix::Zero(1, b);
    Matrix gy = Matrix::Zero(1, b);
    const double w = go(0, 0) / pair_count(static_cast<int>(b));
    for (Eigen::Index i = 0; i < b; ++i) {
      for (Eigen::Index j = i + 1; j < b; ++j) {
        const double tx = std::tanh((xv(0, i) - xv(0, j)) / tau);
        const double ty = std::tanh((yv(0, i) - yv(0, j)) / tau);
        const double dx = w * ty * (1.0 - tx * tx) / tau;
        const double dy = w * tx * (1.0 - ty * ty) / tau;
        gx(0, i) += dx;
        gx(0, j) -= dx;
        gy(0, i) += dy;
        gy(0, j) -= dy;
      }
    }
    g.accumulate(x, gx);
    g.accumulate(y, gy);
  });
}

BatchStructure BatchStructure::from_labels(const std::vector<int>& labels) {
  BatchStructure s;
  s.labels = labels;
  std::map<int, std::vector<int>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(static_cast<int>(i));
  s.class_of_row.assign(labels.size(), -1);
  for (auto& [label, rows] : by_label) {
    for (int r : rows) s.class_of_row[static_cast<std::size_t>(r)] = static_cast<int>(s.classes.size());
    s.classes.push_back(label);
    s.members.push_back(std::move(rows));
  }
  if (s.members.empty()) throw std::invalid_argument("empty batch");
  const std::size_t k = s.members.front().size();
  for (const auto& m : s.members) {
    if (m.size() != k) throw std::invalid_argument("batch is not P x K: identities have different instance counts");
  }
  return s;
}

std::vector<int> SimilarityView::positives(int anchor) const {
  std::vector<int> out;
  for (int r : batch.members[static_cast<std::size_t>(batch.class_of_row[static_cast<std::size_t>(anchor)])]) {
    if (r != anchor) out.push_back(r);
  }
  return out;
}

std::vector<int> SimilarityView::negative_classes(int anchor) const {
  std::vector<int> out;
  const int own = batch.class_of_row[static_cast<std::size_t>(anchor)];
  for (int c = 0; c < batch.num_classes(); ++c) {
    if (c != own) out.push_back(c);
  }
  return out;
}

SimilarityView build_similarity_view(ag::Var f, const BatchStructure& batch) {
  check_labels(f.graph->value(f), batch.labels);
  SimilarityView view;
  view.batch = batch;
  view.similarity = cosine_similarity_matrix(f);
  view.centroid_similarity = ag::cosine_similarity(f, ag::group_mean_rows(f, batch.members));
  return view;
}

ag::Var negative_centroid_similarities(const SimilarityView& view, int anchor) {
  if (view.batch.num_classes() < 2) throw std::invalid_argument("negative centroids need P >= 2");
  std::vector<std::pair<int, int>> entries;
  for (int c : view.negative_classes(anchor)) entries.emplace_back(anchor, c);
  return ag::pick(view.centroid_similarity, std::move(entries));
}

ag::Var ratr_intra(const std::vector<SimilarityView>& views, const RatrConfig& cfg) {
  if (views.empty()) throw std::invalid_argument("ratr needs at least one branch");
  ag::Graph& g = *views.front().similarity.graph;
  const int branches = static_cast<int>(views.size());
  const BatchStructure& batch = views.front().batch;
  if (batch.instances() < 2) throw std::invalid_argument("intra diversity undefined: K must be >= 2");
  if (branches < 2 || batch.instances() < 3) return zero_scalar(g);  // no branch pairs / single-element sequences
  const int rows = static_cast<int>(batch.labels.size());
  std::vector<ag::Var> terms;
  for (int k = 0; k < rows; ++k) {
    std::vector<std::pair<int, int>> entries;
    for (int p : views.front().positives(k)) entries.emplace_back(k, p);
    std::vector<ag::Var> seq;
    seq.reserve(views.size());
    for (const auto& v : views) seq.push_back(ag::pick(v.similarity, entries));
    for (int i = 0; i < branches; ++i) {
      for (int j = i + 1; j < branches; ++j) terms.push_back(dktau(seq[i], seq[j], cfg.tau));
    }
  }
  return ag::scale(sum_terms(g, terms), 1.0 / (static_cast<double>(rows) * pair_count(branches)));
}

ag::Var ratr_inter(const std::vector<SimilarityView>& views, const RatrConfig& cfg) {
  if (views.empty()) throw std::invalid_argument("ratr needs at least one branch");
  ag::Graph& g = *views.front().similarity.graph;
  const int branches = static_cast<int>(views.size());
  const BatchStructure& batch = views.front().batch;
  if (batch.num_classes() <= 2) throw std::invalid_argument("inter diversity undefined (sequence too short): P must be >= 3");
  if (branches < 2) return zero_scalar(g);
  const int rows = static_cast<int>(batch.labels.size());
  std::vector<ag::Var> terms;
  for (int k = 0; k < rows; ++k) {
    std::vector<ag::Var> seq;
    seq.reserve(views.size());
    for (const auto& v : views) seq.push_back(negative_centroid_similarities(v, k));
    for (int i = 0; i < branches; ++i) {
      for (int j = i + 1; j < branches; ++j) terms.push_back(dktau(seq[i], seq[j], cfg.tau));
    }
  }
  return ag::scale(sum_terms(g, terms), 1.0 / (static_cast<double>(rows) * pair_count(branches)));
}

ag::Var ratr(const std::vector<SimilarityView>& views, const RatrConfig& cfg) {
  return ag::add(ratr_intra(views, cfg), ratr_inter(views, cfg));
}

std::vector<LossRecord> LossBreakdown::records() const {
  std::vector<LossRecord> out;
  out.push_back({"total", -1, total});
  out.push_back({"id", -1, id});
  out.push_back({"triplet", -1, triplet});
  out.push_back({"ratr_intra", -1, ratr_intra});
  out.push_back({"ratr_inter", -1, ratr_inter});
  for (std::size_t g = 0; g < id_per_branch.size(); ++g) out.push_back({"id", static_cast<int>(g), id_per_branch[g]});
  for (std::size_t g = 0; g < triplet_per_branch.size(); ++g) {
    out.push_back({"triplet", static_cast<int>(g), triplet_per_branch[g]});
  }
  return out;
}

bool LossBreakdown::finite() const {
  for (const LossRecord& r : records()) {
    if (!std::isfinite(r.value)) return false;
  }
  return true;
}

TotalLoss total_loss(const std::vector<ag::Var>& features, const std::vector<NeckOutput>& necks,
                     const std::vector<int>& labels, const LossConfig& cfg) {
  if (features.empty() || features.size() != necks.size()) {
    throw std::invalid_argument("total_loss needs one neck output per branch feature");
  }
  if (!(cfg.ratr.rho >= 0.0)) throw std::invalid_argument("rho must be >= 0");
  if (!(cfg.ratr.tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  ag::Graph& g = *features.front().graph;
  const int branches = static_cast<int>(features.size());
  TotalLoss out;
  ag::Var supervised;
  for (int b = 0; b < branches; ++b) {
    ag::Var id = id_loss(necks[static_cast<std::size_t>(b)].logits, labels, cfg.smoothing);
    ag::Var tri = batch_hard_triplet(features[static_cast<std::size_t>(b)], labels, cfg.margin);
    out.breakdown.id_per_branch.push_back(g.value(id)(0, 0));
    out.breakdown.triplet_per_branch.push_back(g.value(tri)(0, 0));
    ag::Var term = ag::add(id, tri);
    supervised = b == 0 ? term : ag::add(supervised, term);
  }
  ag::Var total = ag::scale(supervised, 1.0 / static_cast<double>(branches));
  for (int b = 0; b < branches; ++b) {
    out.breakdown.id += out.breakdown.id_per_branch[static_cast<std::size_t>(b)] / branches;
    out.breakdown.triplet += out.breakdown.triplet_per_branch[static_cast<std::size_t>(b)] / branches;
  }
  if (branches >= 2) {
    const BatchStructure batch = BatchStructure::from_labels(labels);
    const bool evaluable = batch.instances() >= 2 && batch.num_classes() >= 3;
    if (cfg.ratr.rho > 0.0 || evaluable) {
      std::vector<SimilarityView> views;
      for (ag::Var f : features) views.push_back(build_similarity_view(f, batch));
      ag::Var intra = ratr_intra(views, cfg.ratr);
      ag::Var inter = ratr_inter(views, cfg.ratr);
      out.breakdown.ratr_intra = g.value(intra)(0, 0);
      out.breakdown.ratr_inter = g.value(inter)(0, 0);
      if (cfg.ratr.rho > 0.0) total = ag::add(total, ag::scale(ag::add(intra, inter), cfg.ratr.rho));
    }
  }
  out.total = total;
  out.breakdown.total = g.value(total)(0, 0);
  return out;
}

}  // namespace reidmamba
