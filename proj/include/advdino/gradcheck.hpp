#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advdino/graph.hpp"

namespace advdino {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // 0 checks every element; otherwise a seeded random subset per leaf.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
  // On failure, also localize offending op nodes.
  bool locate_nodes = true;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  // max |analytic - numeric| divided by the largest gradient magnitude in the leaf.
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = true;
};

struct NodeCheck {
  int node = -1;
  std::string op;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<NodeCheck> faulty_nodes;
  bool pass = true;
};

// Central finite differences over every named leaf that requires grad.
GradCheckReport grad_check(Graph& graph, Var output, const GradCheckOptions& options = {});

// Local check of each op node's backward rule against finite differences of
// its own forward rule, projected on a random output direction.
std::vector<NodeCheck> check_nodes(Graph& graph, const GradCheckOptions& options = {});

}  // namespace advdino
