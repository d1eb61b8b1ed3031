#pragma once

// Exact ranking statistics and re-identification retrieval metrics.

#include "reidmamba/autograd.hpp"

#include <span>
#include <vector>

namespace reidmamba {

/// (1/C(B,2)) sum_{i<j} sign(x_i-x_j) sign(y_i-y_j); ties count as 0.
double ktau_exact(std::span<const double> x, std::span<const double> y);

/// Mean over relevant positions of precision at that position.
double average_precision(const std::vector<bool>& ranked_relevance);

struct LabeledFeatures {
  Matrix features;  // one row per image
  std::vector<int> ids;
  std::vector<int> cameras;
};

struct RankedGallery {
  LabeledFeatures query;
  LabeledFeatures gallery;
};

struct RetrievalMetrics {
  double map = 0.0;
  std::vector<int> ranks;
  std::vector<double> cmc;  // matching ranks
  int evaluated = 0;
  int excluded = 0;  // queries with no valid match

  /// CMC at rank k; k must be one of `ranks`.
  double cmc_at(int k) const;
};

/// Ranks the gallery by descending cosine similarity for every query (ties
/// keep gallery order), drops gallery items sharing both identity and camera
/// with the query, then averages AP and first-match CMC over queries with at
/// least one valid match.
RetrievalMetrics evaluate_map_cmc(const RankedGallery& gal, const std::vector<int>& ranks = {1, 5, 10});

struct DiversityReport {
  double intra = 0.0;
  double inter = 0.0;
  int intra_anchors = 0;
  int inter_anchors = 0;
};

/// Exact-KTau branch agreement: for every anchor and every branch pair, the
/// Kendall's tau between the two branches' similarity rankings of the
/// anchor's positives (intra) and of the negative class centroids in
/// ascending label order (inter). Anchors whose sequences have fewer than two
/// entries are skipped. Needs at least two branches.
DiversityReport branch_diversity_report(const std::vector<Matrix>& branch_features, const std::vector<int>& labels);

/// Same report from precomputed per-branch similarities: pairwise (n x n) and
/// anchor-to-class-centroid (n x classes, classes in ascending label order).
DiversityReport branch_diversity_from_similarity(const std::vector<Matrix>& pairwise,
                                                 const std::vector<Matrix>& centroid,
                                                 const std::vector<int>& labels);

}  // namespace reidmamba
