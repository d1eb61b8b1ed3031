#include "reidmamba/harness/gradcheck.hpp"

#include "reidmamba/harness/dataset.hpp"
#include "reidmamba/harness/trainer.hpp"
#include "reidmamba/init.hpp"
#include "reidmamba/losses.hpp"
#include "reidmamba/mgfe.hpp"
#include "reidmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>

namespace reidmamba {
namespace {

// A scalar objective over a set of parameters. `analytic` leaves the exact
// gradient in every Parameter::grad; `loss` only evaluates.
struct Problem {
  std::vector<Parameter*> params;
  std::function<void()> analytic;
  std::function<double()> loss;
};

// Problems built from a graph closure share the analytic/loss plumbing.
Problem graph_problem(std::vector<Parameter*> params, std::function<ag::Var(ag::Graph&)> build) {
  Problem p;
  p.params = params;
  p.analytic = [params, build] {
    for (Parameter* q : params) q->zero_grad();
    ag::Graph g;
    ag::Var out = build(g);
    g.backward(out);
    g.flush_parameter_grads();
  };
  p.loss = [build] {
    ag::Graph g;
    return g.value(build(g))(0, 0);
  };
  return p;
}

GradcheckReport check(const std::string& selector, Problem& prob, double tolerance, const GradcheckOptions& opts) {
  prob.analytic();
  std::vector<Matrix> analytic;
  for (Parameter* p : prob.params) analytic.push_back(p->grad);
  GradcheckReport report;
  report.selector = selector;
  report.tolerance = tolerance;
  std::mt19937_64 rng(mix_seed(opts.seed, 99));
  for (std::size_t k = 0; k < prob.params.size(); ++k) {
    Parameter& p = *prob.params[k];
    const auto size = static_cast<int>(p.value.size());
    std::vector<int> entries(static_cast<std::size_t>(size));
    std::iota(entries.begin(), entries.end(), 0);
    if (size > opts.max_entries_per_group) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(opts.max_entries_per_group));
      std::sort(entries.begin(), entries.end());
    }
    GroupError ge{p.name, 0, 0.0};
    for (int e : entries) {
      double& slot = p.value.data()[e];
      const double saved = slot;
      slot = saved + opts.step;
      const double up = prob.loss();
      slot = saved - opts.step;
      const double down = prob.loss();
      slot = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double exact = analytic[k].data()[e];
      const double denom = std::max({std::abs(exact), std::abs(numeric), opts.abs_floor});
      ge.max_rel_error = std::max(ge.max_rel_error, std::abs(exact - numeric) / denom);
      ++ge.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, ge.max_rel_error);
    report.groups.push_back(ge);
  }
  return report;
}

Parameter random_param(const std::string& name, int rows, int cols, double scale, std::mt19937_64& rng) {
  return Parameter(name, init::normal(rows, cols, scale, rng));
}

std::vector<int> pk_labels(int p, int k) {
  std::vector<int> labels;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < k; ++j) labels.push_back(i);
  }
  return labels;
}

// Owns the parameters a problem points into.
struct Holder {
  std::vector<std::unique_ptr<Parameter>> owned;
  std::unique_ptr<BiMbBlock> block;
  std::unique_ptr<BnNeckHead> neck;
  std::unique_ptr<ReidModel> model;
  std::unique_ptr<Batch> batch;

  Parameter* add(Parameter p) {
    owned.push_back(std::make_unique<Parameter>(std::move(p)));
    return owned.back().get();
  }
};

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.embed.image_height = 16;
  c.embed.image_width = 8;
  c.embed.patch_size = 4;
  c.embed.stride = 4;
  c.embed.embed_dim = 8;
  c.embed.num_class_tokens = 2;
  c.embed.num_cameras = 2;
  c.inner_dim = 12;
  c.state_dim = 4;
  c.depth = 3;
  c.reduction = 2;
  c.branches = 2;
  c.num_classes = 3;
  return c;
}

Problem build_problem(const std::string& selector, Holder& h, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 7));
  if (selector == "linear") {
    Parameter* w = h.add(random_param("linear.weight", 5, 3, 1.0, rng));
    Parameter* b = h.add(random_param("linear.bias", 1, 3, 1.0, rng));
    const Matrix x = init::normal(4, 5, 1.0, rng);
    const Matrix c = init::normal(4, 3, 1.0, rng);
    return graph_problem({w, b}, [=](ag::Graph& g) {
      ag::Var y = ag::linear(g.constant(x), g.param(*w), g.param(*b));
      return ag::sum(ag::mul(y, g.constant(c)));
    });
  }
  if (selector == "scan") {
    const int t = 7, d = 3, n = 4;
    Parameter* u = h.add(random_param("scan.u", t, d, 1.0, rng));
    Parameter* dt = h.add(random_param("scan.delta_raw", t, d, 0.5, rng));
    Parameter* alog = h.add(random_param("scan.a_log", d, n, 0.5, rng));
    Parameter* b = h.add(random_param("scan.b", t, n, 1.0, rng));
    Parameter* c = h.add(random_param("scan.c", t, n, 1.0, rng));
    Parameter* s = h.add(random_param("scan.d_skip", 1, d, 1.0, rng));
    const Matrix r = init::normal(t, d, 1.0, rng);
    return graph_problem({u, dt, alog, b, c, s}, [=](ag::Graph& g) {
      ag::Var a = ag::scale(ag::exp(g.param(*alog)), -1.0);
      ag::Var y = ag::selective_scan(g.param(*u), ag::softplus(g.param(*dt)), a, g.param(*b), g.param(*c),
                                     g.param(*s));
      return ag::sum(ag::mul(y, g.constant(r)));
    });
  }
  if (selector == "bimb") {
    BlockConfig bc;
    bc.dim = 6;
    bc.inner_dim = 8;
    bc.state_dim = 4;
    bc.dt_rank = 2;
    bc.conv_width = 3;
    bc.drop_rate = 0.2;
    h.block = std::make_unique<BiMbBlock>(BiMbBlock::init("bimb", bc, rng));
    Parameter* x = h.add(random_param("bimb.input", 9, 6, 1.0, rng));
    const Matrix r = init::normal(9, 6, 1.0, rng);
    std::vector<Parameter*> params{x};
    h.block->for_each_parameter([&](Parameter& p) { params.push_back(&p); });
    BiMbBlock* blk = h.block.get();
    // A kept block in train mode also exercises the 1/(1-p) rescale.
    return graph_problem(params, [=](ag::Graph& g) {
      ag::Var y = bimb_forward(g.param(*x), *blk, Mode::train, 0.9);
      return ag::sum(ag::mul(y, g.constant(r)));
    });
  }
  if (selector == "neck") {
    const std::vector<int> labels = pk_labels(3, 3);
    h.neck = std::make_unique<BnNeckHead>(BnNeckHead::init("neck", 5, 4, rng));
    h.neck->classifier.value = init::normal(5, 4, 0.5, rng);
    Parameter* f = h.add(random_param("neck.features", 9, 5, 1.0, rng));
    BnNeckHead* neck = h.neck.get();
    std::vector<Parameter*> params{f};
    neck->for_each_parameter([&](Parameter& p) { params.push_back(&p); });
    return graph_problem(params, [=](ag::Graph& g) {
      NeckOutput out = bnneck_apply(g.param(*f), *neck, Mode::train);
      return id_loss(out.logits, labels, 0.1);
    });
  }
  if (selector == "dktau") {
    Parameter* x = h.add(random_param("dktau.x", 1, 8, 1.0, rng));
    Parameter* y = h.add(random_param("dktau.y", 1, 8, 1.0, rng));
    return graph_problem({x, y}, [=](ag::Graph& g) { return dktau(g.param(*x), g.param(*y), 0.5); });
  }
  if (selector == "ratr") {
    const std::vector<int> labels = pk_labels(3, 3);
    Parameter* f0 = h.add(random_param("ratr.branch0", 9, 6, 1.0, rng));
    Parameter* f1 = h.add(random_param("ratr.branch1", 9, 6, 1.0, rng));
    return graph_problem({f0, f1}, [=](ag::Graph& g) {
      const BatchStructure batch = BatchStructure::from_labels(labels);
      std::vector<SimilarityView> views{build_similarity_view(g.param(*f0), batch),
                                        build_similarity_view(g.param(*f1), batch)};
      return ratr(views, RatrConfig{0.5, 1.0});
    });
  }
  if (selector == "triplet") {
    // A wide margin keeps every anchor's hinge active, and random features
    // make the hardest positive and negative unique.
    const std::vector<int> labels = pk_labels(3, 3);
    Parameter* f = h.add(random_param("triplet.features", 9, 5, 1.0, rng));
    return graph_problem({f}, [=](ag::Graph& g) { return batch_hard_triplet(g.param(*f), labels, 10.0); });
  }
  if (selector == "model") {
    ModelConfig mc = tiny_model_config();
    h.model = std::make_unique<ReidModel>(ReidModel::init(mc, mix_seed(seed, 8)));
    h.batch = std::make_unique<Batch>();
    h.batch->labels = pk_labels(3, 3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < h.batch->labels.size(); ++i) {
      Image img(mc.embed.image_height, mc.embed.image_width);
      for (double& v : img.pixels) v = unit(rng);
      h.batch->images.push_back(std::move(img));
      h.batch->cameras.push_back(static_cast<int>(i % 2));
    }
    Problem p;
    ReidModel* model = h.model.get();
    const Batch* batch = h.batch.get();
    model->for_each_parameter([&](Parameter& q) { p.params.push_back(&q); });
    LossConfig loss;
    loss.ratr.rho = 1.0;
    const std::uint64_t step_seed = mix_seed(seed, 9);
    p.analytic = [=] { compute_gradients(*model, *batch, loss, step_seed); };
    p.loss = [=] { return evaluate_loss(*model, *batch, loss, step_seed).total; };
    return p;
  }
  throw std::invalid_argument("unknown gradcheck selector '" + selector + "'");
}

}  // namespace

std::vector<std::string> gradcheck_selectors() {
  return {"linear", "scan", "bimb", "neck", "dktau", "ratr", "triplet", "model"};
}

GradcheckReport run_gradcheck(const std::string& selector, double tolerance, const GradcheckOptions& opts) {
  Holder holder;
  Problem prob = build_problem(selector, holder, opts.seed);
  return check(selector, prob, tolerance, opts);
}

}  // namespace reidmamba
