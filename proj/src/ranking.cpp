#include "reidmamba/ranking.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace reidmamba {
namespace {

int sign(double v) { return (v > 0.0) - (v < 0.0); }

Matrix normalized_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0)) throw std::domain_error("zero-norm feature row");
    out.row(r) /= n;
  }
  return out;
}

}  // namespace

double ktau_exact(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("ktau sequences differ in length");
  if (x.size() < 2) throw std::invalid_argument("ktau needs sequences of length >= 2");
  long long acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) acc += sign(x[i] - x[j]) * sign(y[i] - y[j]);
  }
  const double pairs = 0.5 * static_cast<double>(x.size()) * static_cast<double>(x.size() - 1);
  return static_cast<double>(acc) / pairs;
}

double average_precision(const std::vector<bool>& ranked_relevance) {
  int hits = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < ranked_relevance.size(); ++i) {
    if (!ranked_relevance[i]) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  if (hits == 0) throw std::invalid_argument("average precision needs at least one relevant entry");
  return acc / hits;
}

double RetrievalMetrics::cmc_at(int k) const {
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (ranks[i] == k) return cmc[i];
  }
  throw std::out_of_range("CMC rank " + std::to_string(k) + " was not evaluated");
}

RetrievalMetrics evaluate_map_cmc(const RankedGallery& gal, const std::vector<int>& ranks) {
  const LabeledFeatures& q = gal.query;
  const LabeledFeatures& g = gal.gallery;
  if (static_cast<Eigen::Index>(q.ids.size()) != q.features.rows() || q.ids.size() != q.cameras.size() ||
      static_cast<Eigen::Index>(g.ids.size()) != g.features.rows() || g.ids.size() != g.cameras.size()) {
    throw std::invalid_argument("labels do not match feature rows");
  }
  if (q.features.cols() != g.features.cols()) throw std::invalid_argument("query/gallery feature widths differ");
  for (int k : ranks) {
    if (k < 1) throw std::invalid_argument("CMC ranks must be >= 1");
  }
  const Matrix sim = normalized_rows(q.features) * normalized_rows(g.features).transpose();

  RetrievalMetrics m;
  m.ranks = ranks;
  m.cmc.assign(ranks.size(), 0.0);
  double ap_sum = 0.0;
  std::vector<int> order(static_cast<std::size_t>(g.features.rows()));
  for (Eigen::Index qi = 0; qi < q.features.rows(); ++qi) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sim(qi, a) > sim(qi, b); });
    std::vector<bool> relevance;
    relevance.reserve(order.size());
    int first_hit = -1;
    for (int gi : order) {
      const bool same_id = g.ids[static_cast<std::size_t>(gi)] == q.ids[static_cast<std::size_t>(qi)];
      const bool same_cam = g.cameras[static_cast<std::size_t>(gi)] == q.cameras[static_cast<std::size_t>(qi)];
      if (same_id && same_cam) continue;
      relevance.push_back(same_id);
      if (same_id && first_hit < 0) first_hit = static_cast<int>(relevance.size());
    }
    if (first_hit < 0) {
      ++m.excluded;
      continue;
    }
    ++m.evaluated;
    ap_sum += average_precision(relevance);
    for (std::size_t r = 0; r < ranks.size(); ++r) {
      if (first_hit <= ranks[r]) m.cmc[r] += 1.0;
    }
  }
  if (m.evaluated > 0) {
    m.map = ap_sum / m.evaluated;
    for (double& c : m.cmc) c /= m.evaluated;
  }
  return m;
}

DiversityReport branch_diversity_from_similarity(const std::vector<Matrix>& pairwise,
                                                 const std::vector<Matrix>& centroid,
                                                 const std::vector<int>& labels) {
  const std::size_t branches = pairwise.size();
  if (branches < 2) throw std::invalid_argument("branch diversity needs at least 2 branches");
  if (centroid.size() != branches) throw std::invalid_argument("one centroid similarity matrix per branch");
  const auto n = static_cast<Eigen::Index>(labels.size());
  std::map<int, std::vector<int>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(static_cast<int>(i));
  std::map<int, int> class_index;
  for (const auto& entry : by_label) class_index.emplace(entry.first, static_cast<int>(class_index.size()));
  for (std::size_t b = 0; b < branches; ++b) {
    if (pairwise[b].rows() != n || pairwise[b].cols() != n || centroid[b].rows() != n ||
        centroid[b].cols() != static_cast<Eigen::Index>(by_label.size())) {
      throw std::invalid_argument("similarity matrix shape does not match labels");
    }
  }

  DiversityReport report;
  double intra_sum = 0.0;
  double inter_sum = 0.0;
  std::vector<double> xs;
  std::vector<double> ys;
  for (Eigen::Index k = 0; k < n; ++k) {
    const int own = labels[static_cast<std::size_t>(k)];
    std::vector<int> pos;
    for (int j : by_label[own]) {
      if (j != k) pos.push_back(j);
    }
    std::vector<int> neg;
    for (const auto& [label, idx] : class_index) {
      if (label != own) neg.push_back(idx);
    }
    if (pos.size() >= 2) {
      ++report.intra_anchors;
      double acc = 0.0;
      for (std::size_t i = 0; i < branches; ++i) {
        for (std::size_t j = i + 1; j < branches; ++j) {
          xs.clear();
          ys.clear();
          for (int p : pos) {
            xs.push_back(pairwise[i](k, p));
            ys.push_back(pairwise[j](k, p));
          }
          acc += ktau_exact(xs, ys);
        }
      }
      intra_sum += acc / (0.5 * static_cast<double>(branches * (branches - 1)));
    }
    if (neg.size() >= 2) {
      ++report.inter_anchors;
      double acc = 0.0;
      for (std::size_t i = 0; i < branches; ++i) {
        for (std::size_t j = i + 1; j < branches; ++j) {
          xs.clear();
          ys.clear();
          for (int c : neg) {
            xs.push_back(centroid[i](k, c));
            ys.push_back(centroid[j](k, c));
          }
          acc += ktau_exact(xs, ys);
        }
      }
      inter_sum += acc / (0.5 * static_cast<double>(branches * (branches - 1)));
    }
  }
  if (report.intra_anchors > 0) report.intra = intra_sum / report.intra_anchors;
  if (report.inter_anchors > 0) report.inter = inter_sum / report.inter_anchors;
  return report;
}

DiversityReport branch_diversity_report(const std::vector<Matrix>& branch_features, const std::vector<int>& labels) {
  if (branch_features.size() < 2) throw std::invalid_argument("branch diversity needs at least 2 branches");
  std::map<int, std::vector<int>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(static_cast<int>(i));
  std::vector<Matrix> pairwise;
  std::vector<Matrix> centroid;
  for (const Matrix& f : branch_features) {
    if (f.rows() != static_cast<Eigen::Index>(labels.size())) {
      throw std::invalid_argument("feature rows do not match labels");
    }
    const Matrix fn = normalized_rows(f);
    Matrix centers(static_cast<Eigen::Index>(by_label.size()), f.cols());
    Eigen::Index c = 0;
    for (const auto& [label, rows] : by_label) {
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(f.cols());
      for (int r : rows) acc += f.row(r);
      centers.row(c++) = acc / static_cast<double>(rows.size());
    }
    pairwise.push_back(fn * fn.transpose());
    centroid.push_back(fn * normalized_rows(centers).transpose());
  }
  return branch_diversity_from_similarity(pairwise, centroid, labels);
}

}  // namespace reidmamba
