#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every op records its output value and a closure that pushes the
// output gradient back onto its inputs. Node ids are issued in creation
// order, so walking ids downward is a valid topological order.

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace reidmamba {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable tensor with its accumulated gradient and optimizer slot.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix velocity;

  Parameter() = default;
  Parameter(std::string n, Matrix v);

  void zero_grad();
};

namespace ag {

class Graph;

struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Matrix& out_grad, const Matrix& out_value)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  /// Leaf that collects a gradient but is not tied to a Parameter.
  Var input(Matrix value);
  /// Leaf reading the parameter's storage in place. Repeated calls return
  /// the same node.
  Var param(Parameter& p);

  /// Records an op output. When no input requires a gradient pass
  /// requires_grad=false and the closure is dropped.
  Var record(Matrix value, bool requires_grad, BackwardFn fn);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  /// Gradient of v; a zero matrix of v's shape when nothing reached it.
  Matrix grad(Var v) const;

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void backward(Var root);
  void backward(Var root, const Matrix& seed);

  /// Adds every parameter leaf's gradient into Parameter::grad.
  void flush_parameter_grads();

  std::size_t size() const { return nodes_.size(); }
  /// Bytes held by recorded (non-parameter) values; used as an allocation proxy.
  std::size_t value_bytes() const;

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Parameter* param = nullptr;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Node n);

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

}  // namespace ag
}  // namespace reidmamba
