#pragma once

#include <random>
#include <span>
#include <utility>
#include <vector>

#include "advdino/checkpoint.hpp"
#include "advdino/graph.hpp"
#include "advdino/module.hpp"

namespace advdino::ssl {

struct HeadConfig {
  std::size_t prototypes = 256;
  std::size_t hidden_dim = 128;
  std::size_t bottleneck_dim = 64;
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  double center_momentum = 0.9;

  void validate() const;
};

ParamStore init_head(const HeadConfig& config, std::size_t input_dim, std::mt19937_64& rng);

// Three-layer GELU MLP to the bottleneck, L2 normalization, then a
// weight-normalized (unit-norm columns) linear layer without bias.
// x is [R, D]; returns [R, K].
Var dino_head(Var x, const Bound& head);

// Teacher view index -> student view index.
using ViewPair = std::pair<std::size_t, std::size_t>;

// Cross-view pairs for a batch whose student rows are laid out as
// [B * n_global global views, B * n_local local views] and whose teacher rows
// are the B * n_global global views. A teacher view is never paired with the
// student view of the same crop.
std::vector<ViewPair> cross_view_pairs(std::size_t batch, std::size_t n_global, std::size_t n_local);

// softmax((t - center) / teacher_temp) row-wise; treated as constant.
Tensor teacher_probs(const Tensor& teacher_logits, const Tensor& center, double teacher_temp);

// Mean over pairs of CE(teacher probs, log_softmax(student / student_temp)).
Var distillation_loss(Var student_logits, const Tensor& teacher_logits, std::span<const ViewPair> pairs,
                      const Tensor& center, double student_temp, double teacher_temp);

// Per-view mean cross-entropy over masked patches, averaged over views that
// have masked patches. `row_view[i]` names the view of student row i; teacher
// rows are aligned with student rows. An empty mask gives a constant zero.
Var mim_loss(Graph& graph, Var student_logits, const Tensor& teacher_logits, std::span<const std::size_t> row_view,
             const Tensor& center, double student_temp, double teacher_temp);

// -(1/n) sum_i log(d_i + eps), d_i the distance from L2-normalized row i to
// its nearest other row (ties to the lower index).
Var koleo_loss(Var embeddings, double eps = 1e-4);

void ema_update(ParamStore& teacher, const ParamStore& student, double momentum);

// momentum * center + (1 - momentum) * mean of teacher logits rows.
Tensor update_center(const Tensor& center, const Tensor& teacher_logits, double momentum);

}  // namespace advdino::ssl
