#pragma once

#include <map>
#include <random>
#include <string>

#include "advdino/checkpoint.hpp"
#include "advdino/graph.hpp"

namespace advdino {

// A parameter set bound into a graph, either as trainable leaves named
// `prefix + name` or as constants.
class Bound {
 public:
  Bound(Graph& graph, const ParamStore& params, std::string prefix, bool trainable);
  Var operator[](const std::string& name) const;
  const std::string& prefix() const { return prefix_; }
  Graph& graph() const { return *graph_; }

  // Picks this module's entries out of a graph gradient map.
  ParamStore gradients(const std::map<std::string, Tensor>& grads) const;

 private:
  Graph* graph_;
  std::string prefix_;
  std::map<std::string, Var> vars_;
};

// Normal(0, std) truncated to +-2 std.
Tensor trunc_normal(Shape shape, double std, std::mt19937_64& rng);

// y = x W + b for x [..., in], W [in, out], b [out].
Var linear(Var x, Var weight, Var bias);
Var linear(Var x, Var weight);

}  // namespace advdino
