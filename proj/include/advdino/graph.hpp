#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdino/tensor.hpp"

namespace advdino {

class Graph;

// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, int node, std::string op)
      : Error(what), node_(node), op_(std::move(op)) {}
  int node() const { return node_; }
  const std::string& op() const { return op_; }

 private:
  int node_;
  std::string op_;
};

struct BackwardArgs {
  std::span<const Tensor* const> inputs;
  const Tensor& output;
  const Tensor& grad_output;
  // Null entries mark inputs that do not need a gradient.
  std::span<Tensor* const> grad_inputs;
};

using ForwardFn = std::function<Tensor(std::span<const Tensor* const>)>;
using BackwardFn = std::function<void(const BackwardArgs&)>;

// Define-by-run computation record. Building an op evaluates it immediately;
// forward() re-evaluates every node in insertion (topological) order so the
// same graph can be replayed on new leaf values.
class Graph {
 public:
  struct Options {
#ifdef NDEBUG
    bool check_finite = false;
#else
    bool check_finite = true;
#endif
  };

  Graph() = default;
  explicit Graph(Options options) : options_(options) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves. Names must be unique among named leaves.
  Var input(const std::string& name, Tensor value);
  Var parameter(const std::string& name, Tensor value);
  Var constant(Tensor value);

  Var apply(std::string op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  void mark_output(const std::string& name, Var v);
  std::optional<Var> find(const std::string& name) const;

  // Replays the graph. Named inputs overwrite leaves of the same name.
  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs = {});

  // Reverse sweep from `output` seeded with `seed`. Returns gradients of every
  // named leaf that requires grad.
  std::map<std::string, Tensor> backward(Var output, const Tensor& seed);
  std::map<std::string, Tensor> backward(Var output);

  const Tensor& value(Var v) const;
  // Gradient from the last backward(); zero tensor if none reached the node.
  Tensor grad(Var v) const;

  // Overwrites a leaf value and marks the graph stale until forward() runs.
  void set_value(Var leaf, Tensor value);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(int id) const { return nodes_.at(id).op; }
  std::vector<Var> inputs_of(int id);
  bool is_leaf(int id) const { return nodes_.at(id).forward == nullptr; }
  bool needs_grad(int id) const { return nodes_.at(id).needs_grad; }
  std::vector<std::pair<std::string, Var>> named_leaves();
  const Options& options() const { return options_; }
  void set_check_finite(bool v) { options_.check_finite = v; }

  // First node (in order) holding a non-finite value, if any.
  std::optional<int> first_nonfinite() const;

  // Runs the backward rule of a single node for a given output gradient.
  std::vector<Tensor> node_backward(int id, const Tensor& grad_output) const;
  Tensor node_forward(int id, const std::vector<Tensor>& inputs) const;

 private:
  struct Node {
    std::string op;
    std::string name;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var add_leaf(const std::string& name, Tensor value, bool requires_grad, const char* op);
  void check_node(int id) const;

  Options options_;
  std::vector<Node> nodes_;
  std::map<std::string, int> names_;
  std::map<std::string, int> outputs_;
  bool stale_ = false;
};

// Differentiable ops. All inputs must belong to the same graph.
namespace ops {

Var identity(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var neg(Var x);

Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var tanh(Var x);
Var relu(Var x);
Var gelu(Var x);
Var clamp_min(Var x, double lo);

// 2-D x 2-D, 3-D x 3-D (batched) or N-D x 2-D (leading dims flattened).
Var matmul(Var a, Var b, bool transpose_b = false);

Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<std::size_t> axes);
Var transpose(Var x);  // 2-D
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& xs, std::size_t axis);
// Rows of a table (axis 0) by index.
Var gather(Var table, std::vector<std::size_t> indices);

Var softmax(Var x);      // last axis
Var log_softmax(Var x);  // last axis
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

Var sum(Var x);
Var mean(Var x);
Var sum(Var x, std::size_t axis, bool keepdim = false);
Var mean(Var x, std::size_t axis, bool keepdim = false);

Var detach(Var x);

}  // namespace ops

inline Var operator+(Var a, Var b) { return ops::add(a, b); }
inline Var operator-(Var a, Var b) { return ops::sub(a, b); }
inline Var operator*(Var a, Var b) { return ops::mul(a, b); }
inline Var operator*(double c, Var x) { return ops::scale(x, c); }
inline Var operator-(Var x) { return ops::neg(x); }

}  // namespace advdino
