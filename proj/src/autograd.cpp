#include "reidmamba/autograd.hpp"

#include <stdexcept>

namespace reidmamba {

Parameter::Parameter(std::string n, Matrix v)
    : name(std::move(n)),
      value(std::move(v)),
      grad(Matrix::Zero(value.rows(), value.cols())),
      velocity(Matrix::Zero(value.rows(), value.cols())) {}

void Parameter::zero_grad() { grad.setZero(value.rows(), value.cols()); }

namespace ag {

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Graph::Node& Graph::node(Var v) {
  if (v.graph != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("variable does not belong to this graph");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.graph != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("variable does not belong to this graph");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = true;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id);
  return v;
}

Var Graph::record(Matrix value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Matrix& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.external != nullptr ? *n.external : n.value;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

bool Graph::has_grad(Var v) const { return node(v).has_grad; }

Matrix Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  const Matrix& val = value(v);
  return Matrix::Zero(val.rows(), val.cols());
}

void Graph::backward(Var root) {
  const Matrix& out = value(root);
  if (out.size() != 1) throw std::invalid_argument("backward(root) needs a scalar root");
  backward(root, Matrix::Ones(1, 1));
}

void Graph::backward(Var root, const Matrix& seed) {
  const Matrix& out = value(root);
  if (seed.rows() != out.rows() || seed.cols() != out.cols()) {
    throw std::invalid_argument("backward seed shape mismatch");
  }
  accumulate(root, seed);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad, n.external != nullptr ? *n.external : n.value);
  }
}

void Graph::flush_parameter_grads() {
  for (const auto& entry : param_nodes_) {
    Node& n = nodes_[static_cast<std::size_t>(entry.second)];
    if (n.has_grad) n.param->grad += n.grad;
  }
}

std::size_t Graph::value_bytes() const {
  std::size_t total = 0;
  for (const Node& n : nodes_) total += static_cast<std::size_t>(n.value.size()) * sizeof(double);
  return total;
}

}  // namespace ag
}  // namespace reidmamba
