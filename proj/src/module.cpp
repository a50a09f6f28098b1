#include "advdino/module.hpp"

namespace advdino {

Bound::Bound(Graph& graph, const ParamStore& params, std::string prefix, bool trainable)
    : graph_(&graph), prefix_(std::move(prefix)) {
  for (const auto& [name, t] : params) {
    vars_[name] = trainable ? graph.parameter(prefix_ + name, t) : graph.constant(t);
  }
}

Var Bound::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw Error("missing parameter '" + prefix_ + name + "'");
  return it->second;
}

ParamStore Bound::gradients(const std::map<std::string, Tensor>& grads) const {
  ParamStore out;
  for (const auto& [name, v] : vars_) {
    auto it = grads.find(prefix_ + name);
    if (it != grads.end()) out[name] = it->second;
  }
  return out;
}

Tensor trunc_normal(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    double z;
    do {
      z = normal(rng);
    } while (z < -2.0 || z > 2.0);
    v = z * std;
  }
  return t;
}

Var linear(Var x, Var weight, Var bias) { return ops::add(ops::matmul(x, weight), bias); }
Var linear(Var x, Var weight) { return ops::matmul(x, weight); }

}  // namespace advdino
