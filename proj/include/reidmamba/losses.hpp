#pragma once

// Training objectives: BNNeck heads, label-smoothed ID loss, batch-hard
// triplet loss and the ranking-aware triplet regularization (RATR) built on
// a tanh-smoothed Kendall's tau.

#include "reidmamba/autograd.hpp"
#include "reidmamba/ssm.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace reidmamba {

struct BnNeckHead {
  int dim = 0;
  int num_classes = 0;
  double momentum = 0.1;
  double eps = 1e-5;
  Parameter gamma;       // 1 x dim
  Parameter beta;        // 1 x dim
  Parameter classifier;  // dim x num_classes, no bias
  Matrix running_mean;   // 1 x dim
  Matrix running_var;    // 1 x dim

  static BnNeckHead init(const std::string& prefix, int dim, int num_classes, std::mt19937_64& rng);

  template <typename F>
  void for_each_parameter(F&& f) {
    f(gamma);
    f(beta);
    f(classifier);
  }
};

struct NeckOutput {
  ag::Var bn_features;
  ag::Var logits;
};

/// Batch normalization over the rows of f followed by the classifier. Train
/// mode normalizes with batch statistics and updates the running statistics;
/// eval mode uses the running statistics (initially mean 0, variance 1).
NeckOutput bnneck_apply(ag::Var f, BnNeckHead& head, Mode mode);

/// Mean cross-entropy against targets with 1-eps on the true class and
/// eps/(C-1) elsewhere.
ag::Var id_loss(ag::Var logits, const std::vector<int>& labels, double smoothing);

/// Mean over anchors of max(0, hardest-positive distance - hardest-negative
/// distance + margin), Euclidean distances between rows of f.
ag::Var batch_hard_triplet(ag::Var f, const std::vector<int>& labels, double margin);

/// Cosine similarity between all rows of f (PK x PK).
ag::Var cosine_similarity_matrix(ag::Var f);

/// (1/C(B,2)) sum_{i<j} tanh((x_i-x_j)/tau) tanh((y_i-y_j)/tau). Needs B >= 2.
double dktau(std::span<const double> x, std::span<const double> y, double tau);
/// Differentiable version over two 1 x B rows.
ag::Var dktau(ag::Var x, ag::Var y, double tau);

/// Identity bookkeeping of a P x K batch. Classes are kept in ascending label
/// order, which fixes the order of every negative-centroid sequence.
struct BatchStructure {
  std::vector<int> labels;
  std::vector<int> classes;
  std::vector<std::vector<int>> members;  // rows per class, ascending
  std::vector<int> class_of_row;          // index into classes

  int num_classes() const { return static_cast<int>(classes.size()); }
  int instances() const { return members.empty() ? 0 : static_cast<int>(members.front().size()); }

  /// Throws std::invalid_argument unless every class has the same count.
  static BatchStructure from_labels(const std::vector<int>& labels);
};

/// Per-branch similarity data used by RATR.
struct SimilarityView {
  ag::Var similarity;           // PK x PK cosine similarities
  ag::Var centroid_similarity;  // PK x P, column c is the class classes[c]
  BatchStructure batch;

  /// Positive indices of `anchor` excluding itself (K-1 entries).
  std::vector<int> positives(int anchor) const;
  /// Negative class columns of `anchor` in ascending label order (P-1 entries).
  std::vector<int> negative_classes(int anchor) const;
};

SimilarityView build_similarity_view(ag::Var f, const BatchStructure& batch);

/// Cosine similarity of row `anchor` to each negative class centroid (1 x (P-1)).
ag::Var negative_centroid_similarities(const SimilarityView& view, int anchor);

struct RatrConfig {
  double tau = 0.1;
  double rho = 1.0;
};

ag::Var ratr_intra(const std::vector<SimilarityView>& views, const RatrConfig& cfg);
ag::Var ratr_inter(const std::vector<SimilarityView>& views, const RatrConfig& cfg);
ag::Var ratr(const std::vector<SimilarityView>& views, const RatrConfig& cfg);

struct LossConfig {
  double smoothing = 0.1;
  double margin = 1.2;
  RatrConfig ratr;
};

struct LossRecord {
  std::string term;
  int branch = -1;  // -1 for whole-model terms
  double value = 0.0;
};

struct LossBreakdown {
  double total = 0.0;
  double id = 0.0;       // mean over branches
  double triplet = 0.0;  // mean over branches
  double ratr_intra = 0.0;
  double ratr_inter = 0.0;
  std::vector<double> id_per_branch;
  std::vector<double> triplet_per_branch;

  std::vector<LossRecord> records() const;
  bool finite() const;
};

struct TotalLoss {
  ag::Var total;
  LossBreakdown breakdown;
};

/// (1/G) sum_g (id_g + triplet_g) + rho * ratr. features[g] are the raw
/// per-branch features (PK x dim); necks[g] the matching BNNeck outputs.
/// With rho = 0 the regularizer is still evaluated for the breakdown when the
/// batch allows it, but it is not part of the objective.
TotalLoss total_loss(const std::vector<ag::Var>& features, const std::vector<NeckOutput>& necks,
                     const std::vector<int>& labels, const LossConfig& cfg);

}  // namespace reidmamba
