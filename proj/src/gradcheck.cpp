#include "advdino/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace advdino {

namespace {

std::vector<std::size_t> pick_elements(std::size_t n, std::size_t max_elements, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_elements == 0 || max_elements >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_elements);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double scaled_error(double max_abs, double scale) { return scale > 1e-12 ? max_abs / scale : max_abs; }

}  // namespace

GradCheckReport grad_check(Graph& graph, Var output, const GradCheckOptions& options) {
  if (graph.value(output).numel() != 1) throw ShapeError("grad_check needs a scalar output");
  GradCheckReport report;
  auto analytic = graph.backward(output);
  std::mt19937_64 rng(options.seed);

  for (auto& [name, leaf] : graph.named_leaves()) {
    if (!graph.needs_grad(leaf.id)) continue;
    const Tensor& a = analytic.at(name);
    Tensor base = graph.value(leaf);
    GradCheckEntry e;
    e.name = name;
    double scale = 0.0;
    for (double v : a.values()) scale = std::max(scale, std::abs(v));
    for (std::size_t i : pick_elements(base.numel(), options.max_elements, rng)) {
      Tensor plus = base, minus = base;
      plus[i] += options.step;
      minus[i] -= options.step;
      graph.set_value(leaf, plus);
      graph.forward();
      double fp = graph.value(output).item();
      graph.set_value(leaf, minus);
      graph.forward();
      double fm = graph.value(output).item();
      double numeric = (fp - fm) / (2.0 * options.step);
      scale = std::max(scale, std::abs(numeric));
      e.max_abs_error = std::max(e.max_abs_error, std::abs(numeric - a[i]));
      ++e.checked;
    }
    graph.set_value(leaf, base);
    graph.forward();
    e.max_rel_error = scaled_error(e.max_abs_error, scale);
    e.pass = e.max_rel_error <= options.tolerance;
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  if (!report.pass && options.locate_nodes) {
    for (auto& nc : check_nodes(graph, options)) {
      if (!nc.pass) report.faulty_nodes.push_back(nc);
    }
  }
  // Leave gradients consistent with the restored values.
  graph.backward(output);
  return report;
}

std::vector<NodeCheck> check_nodes(Graph& graph, const GradCheckOptions& options) {
  std::vector<NodeCheck> out;
  std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int id = 0; id < static_cast<int>(graph.size()); ++id) {
    if (graph.is_leaf(id) || !graph.needs_grad(id)) continue;
    auto inputs_vars = graph.inputs_of(id);
    std::vector<Tensor> inputs;
    for (Var v : inputs_vars) inputs.push_back(graph.value(v));
    Tensor direction(graph.value(Var{&graph, id}).shape());
    for (double& v : direction.values()) v = normal(rng);
    auto analytic = graph.node_backward(id, direction);

    auto project = [&](const std::vector<Tensor>& in) {
      Tensor y = graph.node_forward(id, in);
      double s = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * direction[i];
      return s;
    };

    NodeCheck nc;
    nc.node = id;
    nc.op = graph.op_name(id);
    double max_abs = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!graph.needs_grad(inputs_vars[k].id)) continue;
      for (double v : analytic[k].values()) scale = std::max(scale, std::abs(v));
      for (std::size_t i : pick_elements(inputs[k].numel(), options.max_elements, rng)) {
        auto plus = inputs, minus = inputs;
        plus[k][i] += options.step;
        minus[k][i] -= options.step;
        double numeric = (project(plus) - project(minus)) / (2.0 * options.step);
        scale = std::max(scale, std::abs(numeric));
        max_abs = std::max(max_abs, std::abs(numeric - analytic[k][i]));
      }
    }
    nc.max_rel_error = scaled_error(max_abs, scale);
    nc.pass = nc.max_rel_error <= options.tolerance;
    out.push_back(nc);
  }
  return out;
}

}  // namespace advdino
