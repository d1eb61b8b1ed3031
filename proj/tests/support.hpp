#pragma once

#include "reidmamba/autograd.hpp"
#include "reidmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testing {

using reidmamba::Matrix;
namespace ag = reidmamba::ag;

inline Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

using GraphFn = std::function<ag::Var(ag::Graph&, const std::vector<ag::Var>&)>;

/// Reduces f's output to a scalar with fixed random weights, then compares
/// the tape gradient of every input against central differences. Returns the
/// largest |a - n| / max(|a|, |n|, floor).
inline double fd_max_rel_error(std::vector<Matrix> inputs, const GraphFn& f, double step = 1e-5,
                               double floor = 1e-6) {
  std::mt19937_64 rng(4242);
  Matrix weights;
  auto evaluate = [&](bool with_grad, std::vector<Matrix>* grads) {
    ag::Graph g;
    std::vector<ag::Var> vars;
    for (const Matrix& m : inputs) vars.push_back(g.input(m));
    ag::Var out = f(g, vars);
    if (weights.size() == 0) weights = random_matrix(static_cast<int>(g.value(out).rows()),
                                                     static_cast<int>(g.value(out).cols()), rng);
    ag::Var loss = ag::sum(ag::mul(out, g.constant(weights)));
    if (with_grad) {
      g.backward(loss);
      for (ag::Var v : vars) grads->push_back(g.grad(v));
    }
    return g.value(loss)(0, 0);
  };
  std::vector<Matrix> analytic;
  evaluate(true, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k].data()[i];
      inputs[k].data()[i] = saved + step;
      const double up = evaluate(false, nullptr);
      inputs[k].data()[i] = saved - step;
      const double down = evaluate(false, nullptr);
      inputs[k].data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double exact = analytic[k].data()[i];
      worst = std::max(worst, std::abs(exact - numeric) / std::max({std::abs(exact), std::abs(numeric), floor}));
    }
  }
  return worst;
}

}  // namespace testing
