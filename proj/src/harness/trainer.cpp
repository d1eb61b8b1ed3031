#include "reidmamba/harness/trainer.hpp"

#include "reidmamba/ops.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace reidmamba {
namespace {

TotalLoss batch_loss(ag::Graph& g, ReidModel& model, const Batch& batch, const LossConfig& loss,
                     std::uint64_t step_seed) {
  if (batch.images.empty() || batch.images.size() != batch.cameras.size() ||
      batch.images.size() != batch.labels.size()) {
    throw std::invalid_argument("batch needs one camera and one label per image");
  }
  const std::size_t branches = model.branches.size();
  std::vector<std::vector<ag::Var>> per_branch(branches);
  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    std::vector<ag::Var> f = sample_features(g, batch.images[i], batch.cameras[i], model, Mode::train,
                                             drop_source(step_seed, static_cast<int>(i)));
    for (std::size_t b = 0; b < branches; ++b) per_branch[b].push_back(f[b]);
  }
  std::vector<ag::Var> features;
  std::vector<NeckOutput> necks;
  for (std::size_t b = 0; b < branches; ++b) {
    features.push_back(ag::concat_rows(per_branch[b]));
    necks.push_back(bnneck_apply(features.back(), model.necks[b], Mode::train));
  }
  return total_loss(features, necks, batch.labels, loss);
}

std::string describe(const LossBreakdown& b) {
  std::ostringstream out;
  out << std::setprecision(10);
  for (const LossRecord& r : b.records()) {
    out << "\n  " << r.term;
    if (r.branch >= 0) out << "[" << r.branch << "]";
    out << " = " << r.value;
  }
  return out.str();
}

}  // namespace

double lr_schedule(int step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("step must be >= 0");
  const int warmup = cfg.warmup_steps();
  const int total = cfg.total_steps();
  if (step < warmup) {
    return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * static_cast<double>(step) / warmup;
  }
  const int span = total - 1 - warmup;
  if (span <= 0) return cfg.base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

DropSource drop_source(std::uint64_t step_seed, int sample) {
  return [step_seed, sample](int block) {
    return counter_uniform(step_seed, static_cast<std::uint64_t>(sample), static_cast<std::uint64_t>(block), 0);
  };
}

LossBreakdown compute_gradients(ReidModel& model, const Batch& batch, const LossConfig& loss,
                                std::uint64_t step_seed) {
  model.for_each_parameter([](Parameter& p) { p.zero_grad(); });
  ag::Graph g;
  TotalLoss tl = batch_loss(g, model, batch, loss, step_seed);
  if (tl.breakdown.finite()) {
    g.backward(tl.total);
    g.flush_parameter_grads();
  }
  return tl.breakdown;
}

LossBreakdown evaluate_loss(ReidModel& model, const Batch& batch, const LossConfig& loss, std::uint64_t step_seed) {
  ag::Graph g;
  return batch_loss(g, model, batch, loss, step_seed).breakdown;
}

void sgd_update(ReidModel& model, double lr, double momentum, double weight_decay) {
  model.for_each_parameter([&](Parameter& p) {
    if (weight_decay > 0.0) {
      p.velocity = momentum * p.velocity + p.grad + weight_decay * p.value;
    } else {
      p.velocity = momentum * p.velocity + p.grad;
    }
    p.value -= lr * p.velocity;
  });
}

LossBreakdown train_step(ReidModel& model, const Batch& batch, double lr, const TrainConfig& cfg,
                         std::uint64_t step_seed) {
  LossBreakdown b = compute_gradients(model, batch, cfg.loss, step_seed);
  if (!b.finite()) throw NonFiniteLoss("non-finite training loss:" + describe(b), b);
  sgd_update(model, lr, cfg.momentum, cfg.weight_decay);
  return b;
}

std::vector<Eigen::RowVectorXd> infer_branch_features(ReidModel& model, const Image& image, int camera) {
  const Image flipped = mirror(image);
  std::vector<Eigen::RowVectorXd> out;
  ag::Graph g;
  std::vector<ag::Var> a = sample_features(g, image, camera, model, Mode::eval);
  std::vector<ag::Var> b = sample_features(g, flipped, camera, model, Mode::eval);
  for (std::size_t i = 0; i < a.size(); ++i) {
    Eigen::RowVectorXd f = 0.5 * (g.value(a[i]) + g.value(b[i]));
    const double n = f.norm();
    if (!(n > 0.0)) throw std::domain_error("zero-norm inference feature");
    out.push_back(f / n);
  }
  return out;
}

Eigen::RowVectorXd infer_features(ReidModel& model, const Image& image, int camera) {
  const std::vector<Eigen::RowVectorXd> parts = infer_branch_features(model, image, camera);
  Eigen::Index dim = 0;
  for (const auto& p : parts) dim += p.size();
  Eigen::RowVectorXd out(dim);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.segment(at, p.size()) = p;
    at += p.size();
  }
  return out;
}

Evaluation evaluate_model(ReidModel& model, const Dataset& data) {
  const std::size_t branches = model.branches.size();
  const std::size_t total = data.query.size() + data.gallery.size();
  const int dim = model.cfg.feature_dim();
  std::vector<Matrix> per_branch(branches, Matrix(static_cast<Eigen::Index>(total), dim));
  std::vector<int> labels;
  RankedGallery gal;
  gal.query.features.resize(static_cast<Eigen::Index>(data.query.size()), model.cfg.total_feature_dim());
  gal.gallery.features.resize(static_cast<Eigen::Index>(data.gallery.size()), model.cfg.total_feature_dim());
  std::size_t row = 0;
  auto encode = [&](const Sample& s, LabeledFeatures& into, Eigen::Index r) {
    const std::vector<Eigen::RowVectorXd> parts = infer_branch_features(model, s.image, s.camera);
    for (std::size_t b = 0; b < branches; ++b) {
      per_branch[b].row(static_cast<Eigen::Index>(row)) = parts[b];
      into.features.row(r).segment(static_cast<Eigen::Index>(b) * dim, dim) = parts[b];
    }
    into.ids.push_back(s.identity);
    into.cameras.push_back(s.camera);
    labels.push_back(s.identity);
    ++row;
  };
  for (std::size_t i = 0; i < data.query.size(); ++i) encode(data.query[i], gal.query, static_cast<Eigen::Index>(i));
  for (std::size_t i = 0; i < data.gallery.size(); ++i) {
    encode(data.gallery[i], gal.gallery, static_cast<Eigen::Index>(i));
  }
  Evaluation ev;
  ev.retrieval = evaluate_map_cmc(gal);
  if (branches >= 2) ev.diversity = branch_diversity_report(per_branch, labels);
  return ev;
}

Batch make_batch(const std::vector<Sample>& train, const std::vector<int>& indices, const TrainConfig& cfg, int step) {
  Batch batch;
  for (std::size_t slot = 0; slot < indices.size(); ++slot) {
    const Sample& s = train.at(static_cast<std::size_t>(indices[slot]));
    std::mt19937_64 rng(mix_seed(cfg.seed, 12, static_cast<std::uint64_t>(step), slot));
    batch.images.push_back(augment(s.image, cfg.augment, rng));
    batch.cameras.push_back(s.camera);
    batch.labels.push_back(s.identity);
  }
  return batch;
}

TrainRun train_model(const TrainConfig& cfg_in, const Dataset& data,
                     const std::function<void(const StepLog&)>& on_step) {
  TrainConfig cfg = cfg_in;
  cfg.model.num_classes = data.num_train_identities;
  cfg.data.train_identities = data.num_train_identities;
  cfg.validate();
  TrainRun run{ReidModel::init(cfg.model, mix_seed(cfg.seed, 10)), {}, {}};
  std::vector<int> labels;
  for (const Sample& s : data.train) labels.push_back(s.identity);
  PkSampler sampler(labels, cfg.batch_p, cfg.batch_k, mix_seed(cfg.seed, 11));
  const int total = cfg.total_steps();
  for (int step = 0; step < total; ++step) {
    StepLog entry;
    entry.step = step;
    entry.lr = lr_schedule(step, cfg);
    const Batch batch = make_batch(data.train, sampler.next(), cfg, step);
    entry.loss = train_step(run.model, batch, entry.lr, cfg, mix_seed(cfg.seed, 13, static_cast<std::uint64_t>(step)));
    const bool last = step + 1 == total;
    if (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
      entry.eval = evaluate_model(run.model, data);
      if (last) run.final_eval = *entry.eval;
    }
    if (on_step) on_step(entry);
    run.log.push_back(std::move(entry));
  }
  return run;
}

void write_metrics_header(std::ostream& out) {
  out << "step,lr,loss_total,loss_id,loss_tri,loss_ratr_intra,loss_ratr_inter,mAP,r1,ktau_intra,ktau_inter\n";
}

void write_metrics_row(std::ostream& out, const StepLog& row) {
  std::ostringstream line;
  line << std::setprecision(10) << row.step << ',' << row.lr << ',' << row.loss.total << ',' << row.loss.id << ','
       << row.loss.triplet << ',' << row.loss.ratr_intra << ',' << row.loss.ratr_inter << ',';
  if (row.eval) {
    line << row.eval->retrieval.map << ',' << row.eval->retrieval.cmc_at(1) << ',';
    if (row.eval->diversity) {
      line << row.eval->diversity->intra << ',' << row.eval->diversity->inter;
    } else {
      line << ',';
    }
  } else {
    line << ",,,";
  }
  out << line.str() << '\n';
}

}  // namespace reidmamba
