#pragma once

// Optimization loop, test-time feature extraction and evaluation.

#include "reidmamba/harness/config.hpp"
#include "reidmamba/harness/dataset.hpp"
#include "reidmamba/losses.hpp"
#include "reidmamba/mgfe.hpp"
#include "reidmamba/ranking.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace reidmamba {

/// Warmup from warmup_start_lr to base_lr over warmup_steps, then a half
/// cosine from base_lr down to 0 at step total_steps - 1.
double lr_schedule(int step, const TrainConfig& cfg);

struct Batch {
  std::vector<Image> images;
  std::vector<int> cameras;
  std::vector<int> labels;
};

/// Stochastic-depth draw for (step seed, sample slot, block id).
DropSource drop_source(std::uint64_t step_seed, int sample);

/// Forward of a full batch on one graph, total loss, backward. Leaves the
/// gradient of the total loss in every Parameter::grad (previous contents are
/// overwritten). BNNeck running statistics are updated as in training.
LossBreakdown compute_gradients(ReidModel& model, const Batch& batch, const LossConfig& loss,
                                std::uint64_t step_seed);

/// Same forward pass without the backward.
LossBreakdown evaluate_loss(ReidModel& model, const Batch& batch, const LossConfig& loss, std::uint64_t step_seed);

/// v = momentum * v + (grad + weight_decay * value); value -= lr * v.
void sgd_update(ReidModel& model, double lr, double momentum, double weight_decay);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, LossBreakdown breakdown)
      : std::runtime_error(what), breakdown_(std::move(breakdown)) {}
  const LossBreakdown& breakdown() const { return breakdown_; }

 private:
  LossBreakdown breakdown_;
};

/// compute_gradients then sgd_update at `lr`. Throws NonFiniteLoss (with the
/// per-term breakdown in the message) before touching the parameters when the
/// loss is not finite.
LossBreakdown train_step(ReidModel& model, const Batch& batch, double lr, const TrainConfig& cfg,
                         std::uint64_t step_seed);

/// Per-branch eval-mode features of the image and its mirror, averaged and
/// L2-normalized.
std::vector<Eigen::RowVectorXd> infer_branch_features(ReidModel& model, const Image& image, int camera);

/// infer_branch_features concatenated in branch order (norm sqrt(G)).
Eigen::RowVectorXd infer_features(ReidModel& model, const Image& image, int camera);

struct Evaluation {
  RetrievalMetrics retrieval;
  std::optional<DiversityReport> diversity;  // needs G >= 2
};

/// mAP / CMC on query vs gallery, and branch diversity over all test images.
Evaluation evaluate_model(ReidModel& model, const Dataset& data);

struct StepLog {
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;
  std::optional<Evaluation> eval;
};

struct TrainRun {
  ReidModel model;
  std::vector<StepLog> log;
  Evaluation final_eval;
};

/// Builds the model (num_classes = training identities) and runs
/// cfg.total_steps() steps. Everything random is derived from cfg.seed, so a
/// run is reproducible bit for bit. on_step sees every step as it finishes.
TrainRun train_model(const TrainConfig& cfg, const Dataset& data,
                     const std::function<void(const StepLog&)>& on_step = {});

/// The batch for `step`: sampler indices, augmented with per-(step, slot)
/// generators.
Batch make_batch(const std::vector<Sample>& train, const std::vector<int>& indices, const TrainConfig& cfg, int step);

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StepLog& row);

}  // namespace reidmamba
