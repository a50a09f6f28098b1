#include "advdino/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace advdino {

const Tensor& Var::value() const {
  if (!valid()) throw Error("use of an invalid Var");
  return graph->value(*this);
}

// ---------------------------------------------------------------- Graph ----

Var Graph::add_leaf(const std::string& name, Tensor value, bool requires_grad, const char* op) {
  if (!name.empty() && names_.count(name)) throw Error("duplicate leaf name '" + name + "'");
  Node n;
  n.op = op;
  n.name = name;
  n.needs_grad = requires_grad;
  value.set_requires_grad(requires_grad);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  if (!name.empty()) names_[name] = id;
  check_node(id);
  return Var{this, id};
}

Var Graph::input(const std::string& name, Tensor value) {
  bool rg = value.requires_grad();
  return add_leaf(name, std::move(value), rg, "input");
}

Var Graph::parameter(const std::string& name, Tensor value) {
  return add_leaf(name, std::move(value), true, "parameter");
}

Var Graph::constant(Tensor value) { return add_leaf("", std::move(value), false, "constant"); }

Var Graph::apply(std::string op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  std::vector<const Tensor*> in;
  for (const Var& v : inputs) {
    if (v.graph != this) throw Error("op '" + n.op + "' mixes vars from different graphs");
    n.inputs.push_back(v.id);
    n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    in.push_back(&nodes_[v.id].value);
  }
  n.value = forward(in);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  check_node(id);
  return Var{this, id};
}

void Graph::check_node(int id) const {
  if (!options_.check_finite) return;
  const Node& n = nodes_[id];
  if (!n.value.all_finite()) {
    throw NonFiniteError("non-finite value at node " + std::to_string(id) + " (" + n.op + ")", id, n.op);
  }
}

void Graph::mark_output(const std::string& name, Var v) {
  if (v.graph != this) throw Error("output from a different graph");
  outputs_[name] = v.id;
}

std::optional<Var> Graph::find(const std::string& name) const {
  if (auto it = names_.find(name); it != names_.end()) return Var{const_cast<Graph*>(this), it->second};
  if (auto it = outputs_.find(name); it != outputs_.end()) return Var{const_cast<Graph*>(this), it->second};
  return std::nullopt;
}

std::map<std::string, Tensor> Graph::forward(const std::map<std::string, Tensor>& inputs) {
  for (const auto& [name, t] : inputs) {
    auto it = names_.find(name);
    if (it == names_.end()) throw Error("graph has no leaf named '" + name + "'");
    Node& n = nodes_[it->second];
    if (n.value.shape() != t.shape()) {
      throw ShapeError("leaf '" + name + "' expects shape " + shape_str(n.value.shape()) + ", got " +
                       shape_str(t.shape()));
    }
    bool rg = n.value.requires_grad();
    n.value = t;
    n.value.set_requires_grad(rg);
  }
  std::vector<const Tensor*> in;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (!n.forward) continue;
    in.clear();
    for (int i : n.inputs) in.push_back(&nodes_[i].value);
    n.value = n.forward(in);
    check_node(static_cast<int>(id));
  }
  stale_ = false;
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
  return out;
}

std::map<std::string, Tensor> Graph::backward(Var output) {
  return backward(output, Tensor(value(output).shape(), 1.0));
}

std::map<std::string, Tensor> Graph::backward(Var output, const Tensor& seed) {
  if (output.graph != this) throw Error("backward on a var from another graph");
  if (stale_) throw Error("backward called before forward on a modified graph");
  if (seed.shape() != nodes_[output.id].value.shape()) {
    throw ShapeError("seed shape " + shape_str(seed.shape()) + " does not match output " +
                     shape_str(nodes_[output.id].value.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  nodes_[output.id].grad = seed;
  nodes_[output.id].has_grad = true;

  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (int id = output.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward || !n.needs_grad) continue;
    in.clear();
    gin.clear();
    for (int i : n.inputs) {
      Node& src = nodes_[i];
      in.push_back(&src.value);
      if (src.needs_grad) {
        if (!src.has_grad) {
          src.grad = Tensor(src.value.shape(), 0.0);
          src.has_grad = true;
        }
        gin.push_back(&src.grad);
      } else {
        gin.push_back(nullptr);
      }
    }
    n.backward(BackwardArgs{in, n.value, n.grad, gin});
  }

  std::map<std::string, Tensor> grads;
  for (const auto& [name, id] : names_) {
    const Node& n = nodes_[id];
    if (!n.needs_grad) continue;
    grads[name] = n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
  }
  return grads;
}

const Tensor& Graph::value(Var v) const {
  if (v.graph != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("invalid var");
  return nodes_[v.id].value;
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.has_grad && !n.grad.empty() && n.grad.shape() == n.value.shape()) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

void Graph::set_value(Var leaf, Tensor value) {
  Node& n = nodes_.at(leaf.id);
  if (n.forward) throw Error("set_value on non-leaf node");
  if (n.value.shape() != value.shape()) throw ShapeError("set_value shape mismatch");
  bool rg = n.value.requires_grad();
  n.value = std::move(value);
  n.value.set_requires_grad(rg);
  stale_ = true;
}

std::vector<Var> Graph::inputs_of(int id) {
  std::vector<Var> out;
  for (int i : nodes_.at(id).inputs) out.push_back(Var{this, i});
  return out;
}

std::vector<std::pair<std::string, Var>> Graph::named_leaves() {
  std::vector<std::pair<std::string, Var>> out;
  for (const auto& [name, id] : names_) out.emplace_back(name, Var{this, id});
  return out;
}

std::optional<int> Graph::first_nonfinite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.all_finite()) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::vector<Tensor> Graph::node_backward(int id, const Tensor& grad_output) const {
  const Node& n = nodes_.at(id);
  std::vector<const Tensor*> in;
  std::vector<Tensor> grads;
  grads.reserve(n.inputs.size());
  for (int i : n.inputs) {
    in.push_back(&nodes_[i].value);
    grads.emplace_back(nodes_[i].value.shape(), 0.0);
  }
  std::vector<Tensor*> gin;
  for (auto& g : grads) gin.push_back(&g);
  if (n.backward) n.backward(BackwardArgs{in, n.value, grad_output, gin});
  return grads;
}

Tensor Graph::node_forward(int id, const std::vector<Tensor>& inputs) const {
  const Node& n = nodes_.at(id);
  if (!n.forward) return n.value;
  std::vector<const Tensor*> in;
  for (const auto& t : inputs) in.push_back(&t);
  return n.forward(in);
}

// ------------------------------------------------------------------ ops ----

namespace ops {
namespace {

Graph& graph_of(Var v) {
  if (!v.valid()) throw Error("invalid var");
  return *v.graph;
}

// Numpy-style broadcast of two shapes, aligned on the trailing axis.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.a_stride.assign(r, 0);
  p.b_stride.assign(r, 0);
  auto ext = [&](const Shape& s, std::size_t i) -> std::size_t {
    std::size_t off = r - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t ea = ext(a, i), eb = ext(b, i);
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(ea, eb);
  }
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    std::size_t ea = ext(a, i), eb = ext(b, i);
    p.a_stride[i] = ea == 1 ? 0 : sa;
    p.b_stride[i] = eb == 1 ? 0 : sb;
    sa *= ea;
    sb *= eb;
  }
  return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  std::size_t n = shape_numel(p.out);
  std::size_t r = p.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ao, bo);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ao += p.a_stride[d];
      bo += p.b_stride[d];
      if (idx[d] < p.out[d]) break;
      ao -= p.a_stride[d] * idx[d];
      bo -= p.b_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// f(a, b) -> value; da(a, b, y) and db(a, b, y) -> local partials.
template <class F, class DA, class DB>
Var binary(const char* name, Var a, Var b, F f, DA da, DB db) {
  Graph& g = graph_of(a);
  auto fwd = [f](std::span<const Tensor* const> in) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    if (x.shape() == y.shape()) {
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i], y[i]);
      return out;
    }
    Broadcast p = plan_broadcast(x.shape(), y.shape());
    Tensor out(p.out);
    for_each_broadcast(p, [&](std::size_t i, std::size_t ao, std::size_t bo) { out[i] = f(x[ao], y[bo]); });
    return out;
  };
  auto bwd = [da, db](const BackwardArgs& args) {
    const Tensor& x = *args.inputs[0];
    const Tensor& y = *args.inputs[1];
    Tensor* gx = args.grad_inputs[0];
    Tensor* gy = args.grad_inputs[1];
    const Tensor& go = args.grad_output;
    const Tensor& out = args.output;
    if (x.shape() == y.shape()) {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        if (gx) (*gx)[i] += go[i] * da(x[i], y[i], out[i]);
        if (gy) (*gy)[i] += go[i] * db(x[i], y[i], out[i]);
      }
      return;
    }
    Broadcast p = plan_broadcast(x.shape(), y.shape());
    for_each_broadcast(p, [&](std::size_t i, std::size_t ao, std::size_t bo) {
      if (gx) (*gx)[ao] += go[i] * da(x[ao], y[bo], out[i]);
      if (gy) (*gy)[bo] += go[i] * db(x[ao], y[bo], out[i]);
    });
  };
  return g.apply(name, {a, b}, fwd, bwd);
}

// f(x) -> value; df(x, y) -> local derivative.
template <class F, class DF>
Var unary(const char* name, Var x, F f, DF df) {
  Graph& g = graph_of(x);
  auto fwd = [f](std::span<const Tensor* const> in) {
    Tensor out(in[0]->shape());
    const Tensor& v = *in[0];
    for (std::size_t i = 0; i < v.numel(); ++i) out[i] = f(v[i]);
    return out;
  };
  auto bwd = [df](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    Tensor& gx = *args.grad_inputs[0];
    const Tensor& v = *args.inputs[0];
    for (std::size_t i = 0; i < v.numel(); ++i) gx[i] += args.grad_output[i] * df(v[i], args.output[i]);
  };
  return g.apply(name, {x}, fwd, bwd);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

}  // namespace

Var identity(Var x) {
  return unary("identity", x, [](double v) { return v; }, [](double, double) { return 1.0; });
}

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Var scale(Var x, double c) {
  return unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var neg(Var x) { return scale(x, -1.0); }

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt(Var x) {
  // Subgradient 0 at the origin.
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var tanh(Var x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

Var clamp_min(Var x, double lo) {
  return unary(
      "clamp_min", x, [lo](double v) { return v > lo ? v : lo; },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Var matmul(Var a, Var b, bool transpose_b) {
  Graph& g = graph_of(a);
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const bool batched = sb.size() == 3;
  if (sb.size() > 3 || (batched && (sa.size() != 3 || sa[0] != sb[0]))) {
    throw ShapeError("matmul batch mismatch " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t k = sa.back();
  const std::size_t kb = transpose_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (k != kb) throw ShapeError("matmul inner mismatch " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = batched ? sa[1] : shape_numel(sa) / k;
  Shape out_shape = sa;
  out_shape.back() = n;

  auto fwd = [=](std::span<const Tensor* const> in) {
    Tensor out(out_shape);
    const std::size_t bsz = transpose_b ? n * k : k * n;
    for (std::size_t t = 0; t < batch; ++t) {
      MapC A(in[0]->data() + t * m * k, m, k);
      Map C(out.data() + t * m * n, m, n);
      if (transpose_b) {
        MapC B(in[1]->data() + t * bsz, n, k);
        C.noalias() = A * B.transpose();
      } else {
        MapC B(in[1]->data() + t * bsz, k, n);
        C.noalias() = A * B;
      }
    }
    return out;
  };
  auto bwd = [=](const BackwardArgs& args) {
    const std::size_t bsz = transpose_b ? n * k : k * n;
    for (std::size_t t = 0; t < batch; ++t) {
      MapC A(args.inputs[0]->data() + t * m * k, m, k);
      MapC G(args.grad_output.data() + t * m * n, m, n);
      if (args.grad_inputs[0]) {
        Map GA(args.grad_inputs[0]->data() + t * m * k, m, k);
        if (transpose_b) {
          GA.noalias() += G * MapC(args.inputs[1]->data() + t * bsz, n, k);
        } else {
          GA.noalias() += G * MapC(args.inputs[1]->data() + t * bsz, k, n).transpose();
        }
      }
      if (args.grad_inputs[1]) {
        if (transpose_b) {
          Map GB(args.grad_inputs[1]->data() + t * bsz, n, k);
          GB.noalias() += G.transpose() * A;
        } else {
          Map GB(args.grad_inputs[1]->data() + t * bsz, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    }
  };
  return g.apply("matmul", {a, b}, fwd, bwd);
}

Var reshape(Var x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto fwd = [shape](std::span<const Tensor* const> in) { return in[0]->reshaped(shape); };
  auto bwd = [](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += args.grad_output[i];
  };
  return graph_of(x).apply("reshape", {x}, fwd, bwd);
}

namespace {
// Maps every output flat index of a permutation to its source flat index.
std::vector<std::size_t> permute_index(const Shape& in_shape, const std::vector<std::size_t>& axes) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += in_stride[axes[d]];
      if (idx[d] < out_shape[d]) break;
      off -= in_stride[axes[d]] * idx[d];
      idx[d] = 0;
    }
  }
  return src;
}
}  // namespace

Var permute(Var x, std::vector<std::size_t> axes) {
  const Shape s = x.shape();
  if (axes.size() != s.size()) throw ShapeError("permute rank mismatch");
  std::vector<bool> seen(axes.size(), false);
  for (auto a : axes) {
    if (a >= s.size() || seen[a]) throw ShapeError("permute axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  auto src = std::make_shared<std::vector<std::size_t>>(permute_index(s, axes));
  auto fwd = [src, out_shape](std::span<const Tensor* const> in) {
    Tensor out(out_shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (*in[0])[(*src)[i]];
    return out;
  };
  auto bwd = [src](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t i = 0; i < args.grad_output.numel(); ++i) gx[(*src)[i]] += args.grad_output[i];
  };
  return graph_of(x).apply("permute", {x}, fwd, bwd);
}

Var transpose(Var x) {
  if (x.shape().size() != 2) throw ShapeError("transpose needs a 2-D tensor");
  return permute(x, {1, 0});
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw ShapeError("slice out of range on " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  auto fwd = [=](std::span<const Tensor* const> in) {
    Tensor out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = in[0]->data() + (o * extent + start) * inner;
      std::copy(src, src + length * inner, out.data() + o * length * inner);
    }
    return out;
  };
  auto bwd = [=](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t o = 0; o < outer; ++o) {
      double* dst = gx.data() + (o * extent + start) * inner;
      const double* src = args.grad_output.data() + o * length * inner;
      for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
    }
  };
  return graph_of(x).apply("slice", {x}, fwd, bwd);
}

Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range");
  std::vector<std::size_t> extents;
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& v : xs) {
    const Shape s = v.shape();
    if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) throw ShapeError("concat extent mismatch");
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t total = out_shape[axis];
  auto fwd = [=](std::span<const Tensor* const> in) {
    Tensor out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
      std::size_t pos = 0;
      for (std::size_t j = 0; j < in.size(); ++j) {
        const double* src = in[j]->data() + o * extents[j] * inner;
        std::copy(src, src + extents[j] * inner, out.data() + (o * total + pos) * inner);
        pos += extents[j];
      }
    }
    return out;
  };
  auto bwd = [=](const BackwardArgs& args) {
    for (std::size_t o = 0; o < outer; ++o) {
      std::size_t pos = 0;
      for (std::size_t j = 0; j < args.inputs.size(); ++j) {
        if (Tensor* gx = args.grad_inputs[j]) {
          const double* src = args.grad_output.data() + (o * total + pos) * inner;
          double* dst = gx->data() + o * extents[j] * inner;
          for (std::size_t i = 0; i < extents[j] * inner; ++i) dst[i] += src[i];
        }
        pos += extents[j];
      }
    }
  };
  return graph_of(xs[0]).apply("concat", xs, fwd, bwd);
}

Var gather(Var table, std::vector<std::size_t> indices) {
  const Shape s = table.shape();
  if (s.empty()) throw ShapeError("gather from a scalar");
  if (indices.empty()) throw ShapeError("gather with no indices");
  for (auto i : indices) {
    if (i >= s[0]) throw ShapeError("gather index " + std::to_string(i) + " out of range");
  }
  const std::size_t row = shape_numel(s) / s[0];
  Shape out_shape = s;
  out_shape[0] = indices.size();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  auto fwd = [=](std::span<const Tensor* const> in) {
    Tensor out(out_shape);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const double* src = in[0]->data() + (*idx)[r] * row;
      std::copy(src, src + row, out.data() + r * row);
    }
    return out;
  };
  auto bwd = [=](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = gx.data() + (*idx)[r] * row;
      const double* src = args.grad_output.data() + r * row;
      for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
    }
  };
  return graph_of(table).apply("gather", {table}, fwd, bwd);
}

namespace {
std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

void softmax_rows(const Tensor& x, Tensor& out) {
  const std::size_t d = last_extent(x);
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * d;
    double* yi = out.data() + r * d;
    double m = *std::max_element(xi, xi + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yi[j] = std::exp(xi[j] - m);
      z += yi[j];
    }
    for (std::size_t j = 0; j < d; ++j) yi[j] /= z;
  }
}
}  // namespace

Var softmax(Var x) {
  auto fwd = [](std::span<const Tensor* const> in) {
    Tensor out(in[0]->shape());
    softmax_rows(*in[0], out);
    return out;
  };
  auto bwd = [](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    const Tensor& y = args.output;
    const std::size_t d = last_extent(y);
    const std::size_t rows = y.numel() / d;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yi = y.data() + r * d;
      const double* gi = args.grad_output.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += gi[j] * yi[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += yi[j] * (gi[j] - dot);
    }
  };
  return graph_of(x).apply("softmax", {x}, fwd, bwd);
}

Var log_softmax(Var x) {
  auto fwd = [](std::span<const Tensor* const> in) {
    const Tensor& v = *in[0];
    Tensor out(v.shape());
    const std::size_t d = last_extent(v);
    const std::size_t rows = v.numel() / d;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xi = v.data() + r * d;
      double m = *std::max_element(xi, xi + d);
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += std::exp(xi[j] - m);
      double lse = m + std::log(z);
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xi[j] - lse;
    }
    return out;
  };
  auto bwd = [](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    const Tensor& y = args.output;
    const std::size_t d = last_extent(y);
    const std::size_t rows = y.numel() / d;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gi = args.grad_output.data() + r * d;
      double gsum = 0.0;
      for (std::size_t j = 0; j < d; ++j) gsum += gi[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gi[j] - std::exp(y[r * d + j]) * gsum;
    }
  };
  return graph_of(x).apply("log_softmax", {x}, fwd, bwd);
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const std::size_t d = x.shape().empty() ? 1 : x.shape().back();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw ShapeError("layer_norm affine width mismatch");
  }
  auto fwd = [d, eps](std::span<const Tensor* const> in) {
    const Tensor& v = *in[0];
    const Tensor& ga = *in[1];
    const Tensor& be = *in[2];
    Tensor out(v.shape());
    const std::size_t rows = v.numel() / d;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xi = v.data() + r * d;
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += xi[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xi[j] - mu) * inv * ga[j] + be[j];
    }
    return out;
  };
  auto bwd = [d, eps](const BackwardArgs& args) {
    const Tensor& v = *args.inputs[0];
    const Tensor& ga = *args.inputs[1];
    const std::size_t rows = v.numel() / d;
    std::vector<double> xhat(d), gh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xi = v.data() + r * d;
      const double* gi = args.grad_output.data() + r * d;
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += xi[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      double mg = 0.0, mgx = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (xi[j] - mu) * inv;
        gh[j] = gi[j] * ga[j];
        mg += gh[j];
        mgx += gh[j] * xhat[j];
      }
      mg /= static_cast<double>(d);
      mgx /= static_cast<double>(d);
      if (Tensor* gx = args.grad_inputs[0]) {
        for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += inv * (gh[j] - mg - xhat[j] * mgx);
      }
      if (Tensor* gg = args.grad_inputs[1]) {
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gi[j] * xhat[j];
      }
      if (Tensor* gb = args.grad_inputs[2]) {
        for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gi[j];
      }
    }
  };
  return graph_of(x).apply("layer_norm", {x, gamma, beta}, fwd, bwd);
}

Var sum(Var x) {
  auto fwd = [](std::span<const Tensor* const> in) {
    double s = 0.0;
    for (double v : in[0]->values()) s += v;
    return Tensor::scalar(s);
  };
  auto bwd = [](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    double g = args.grad_output[0];
    for (double& v : args.grad_inputs[0]->values()) v += g;
  };
  return graph_of(x).apply("sum", {x}, fwd, bwd);
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var sum(Var x, std::size_t axis, bool keepdim) {
  const Shape s = x.shape();
  if (axis >= s.size()) throw ShapeError("sum axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  auto fwd = [=](std::span<const Tensor* const> in) {
    Tensor out(out_shape, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < extent; ++e)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += (*in[0])[(o * extent + e) * inner + i];
    return out;
  };
  auto bwd = [=](const BackwardArgs& args) {
    if (!args.grad_inputs[0]) return;
    Tensor& gx = *args.grad_inputs[0];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < extent; ++e)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * extent + e) * inner + i] += args.grad_output[o * inner + i];
  };
  return graph_of(x).apply("sum_axis", {x}, fwd, bwd);
}

Var mean(Var x, std::size_t axis, bool keepdim) {
  const double n = static_cast<double>(x.shape().at(axis));
  return scale(sum(x, axis, keepdim), 1.0 / n);
}

Var detach(Var x) { return graph_of(x).constant(x.value()); }

}  // namespace ops
}  // namespace advdino
