#include "advdino/ssl.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <map>
#include <limits>

namespace advdino::ssl {

void HeadConfig::validate() const {
  if (prototypes == 0 || hidden_dim == 0 || bottleneck_dim == 0) throw Error("head widths must be positive");
  if (!(student_temp > 0.0) || !(teacher_temp > 0.0)) throw Error("temperatures must be positive");
  if (!(center_momentum >= 0.0 && center_momentum <= 1.0)) throw Error("center momentum must be in [0, 1]");
}

ParamStore init_head(const HeadConfig& cfg, std::size_t input_dim, std::mt19937_64& rng) {
  cfg.validate();
  ParamStore p;
  p["mlp.0.weight"] = trunc_normal({input_dim, cfg.hidden_dim}, 0.02, rng);
  p["mlp.0.bias"] = Tensor(Shape{cfg.hidden_dim}, 0.0);
  p["mlp.1.weight"] = trunc_normal({cfg.hidden_dim, cfg.hidden_dim}, 0.02, rng);
  p["mlp.1.bias"] = Tensor(Shape{cfg.hidden_dim}, 0.0);
  p["mlp.2.weight"] = trunc_normal({cfg.hidden_dim, cfg.bottleneck_dim}, 0.02, rng);
  p["mlp.2.bias"] = Tensor(Shape{cfg.bottleneck_dim}, 0.0);
  p["last_layer.weight_v"] = trunc_normal({cfg.bottleneck_dim, cfg.prototypes}, 0.02, rng);
  return p;
}

Var dino_head(Var x, const Bound& head) {
  Var h = ops::gelu(linear(x, head["mlp.0.weight"], head["mlp.0.bias"]));
  h = ops::gelu(linear(h, head["mlp.1.weight"], head["mlp.1.bias"]));
  Var z = linear(h, head["mlp.2.weight"], head["mlp.2.bias"]);
  Var znorm = ops::clamp_min(ops::sqrt(ops::sum(ops::mul(z, z), 1, true)), 1e-12);
  z = ops::div(z, znorm);
  Var v = head["last_layer.weight_v"];
  Var vnorm = ops::sqrt(ops::sum(ops::mul(v, v), 0, true));
  return ops::matmul(z, ops::div(v, vnorm));
}

std::vector<ViewPair> cross_view_pairs(std::size_t batch, std::size_t n_global, std::size_t n_local) {
  std::vector<ViewPair> pairs;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t a = 0; a < n_global; ++a) {
      const std::size_t t = b * n_global + a;
      for (std::size_t s = 0; s < n_global; ++s) {
        if (s != a) pairs.emplace_back(t, b * n_global + s);
      }
      for (std::size_t l = 0; l < n_local; ++l) pairs.emplace_back(t, batch * n_global + b * n_local + l);
    }
  return pairs;
}

Tensor teacher_probs(const Tensor& logits, const Tensor& center, double teacher_temp) {
  if (logits.rank() != 2 || center.numel() != logits.dim(1)) throw ShapeError("teacher logits / center mismatch");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, (logits.at(r, j) - center[j]) / teacher_temp);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += p.at(r, j) = std::exp((logits.at(r, j) - center[j]) / teacher_temp - m);
    for (std::size_t j = 0; j < k; ++j) p.at(r, j) /= z;
  }
  return p;
}

Var distillation_loss(Var student_logits, const Tensor& teacher_logits, std::span<const ViewPair> pairs,
                      const Tensor& center, double student_temp, double teacher_temp) {
  if (pairs.empty()) throw Error("distillation_loss: no valid view pair");
  const Shape ss = student_logits.shape();
  if (ss.size() != 2 || ss[1] != teacher_logits.dim(1)) throw ShapeError("student/teacher logit width mismatch");
  Tensor probs = teacher_probs(teacher_logits, center, teacher_temp);
  const std::size_t k = ss[1];
  Tensor weights(ss, 0.0);
  for (auto [t, s] : pairs) {
    if (t >= probs.dim(0) || s >= ss[0]) throw ShapeError("view pair index out of range");
    for (std::size_t j = 0; j < k; ++j) weights.at(s, j) += probs.at(t, j);
  }
  Graph& g = *student_logits.graph;
  Var logp = ops::log_softmax(ops::scale(student_logits, 1.0 / student_temp));
  Var ce = ops::sum(ops::mul(g.constant(std::move(weights)), logp));
  return ops::scale(ce, -1.0 / static_cast<double>(pairs.size()));
}

Var mim_loss(Graph& graph, Var student_logits, const Tensor& teacher_logits, std::span<const std::size_t> row_view,
             const Tensor& center, double student_temp, double teacher_temp) {
  if (row_view.empty()) {
    spdlog::warn("empty MIM mask; masked-image loss contributes 0");
    return graph.constant(Tensor::scalar(0.0));
  }
  const Shape ss = student_logits.shape();
  if (ss.size() != 2 || ss[0] != row_view.size() || teacher_logits.shape() != ss) {
    throw ShapeError("mim_loss: student/teacher/mask rows misaligned");
  }
  std::map<std::size_t, std::size_t> per_view;
  for (auto v : row_view) ++per_view[v];
  const double views = static_cast<double>(per_view.size());
  Tensor probs = teacher_probs(teacher_logits, center, teacher_temp);
  for (std::size_t r = 0; r < ss[0]; ++r) {
    const double w = 1.0 / (static_cast<double>(per_view[row_view[r]]) * views);
    for (std::size_t j = 0; j < ss[1]; ++j) probs.at(r, j) *= w;
  }
  Var logp = ops::log_softmax(ops::scale(student_logits, 1.0 / student_temp));
  return ops::neg(ops::sum(ops::mul(graph.constant(std::move(probs)), logp)));
}

Var koleo_loss(Var embeddings, double eps) {
  const Shape s = embeddings.shape();
  if (s.size() != 2 || s[0] < 2) throw Error("koleo_loss needs a batch of at least two embeddings");
  const std::size_t n = s[0];
  Var norms = ops::clamp_min(ops::sqrt(ops::sum(ops::mul(embeddings, embeddings), 1, true)), 1e-12);
  Var x = ops::div(embeddings, norms);
  const Tensor xv = x.value();
  const std::size_t d = s[1];
  std::vector<std::size_t> nearest(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = xv.at(i, k) - xv.at(j, k);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        nearest[i] = j;
      }
    }
  }
  Var diff = ops::sub(x, ops::gather(x, nearest));
  Var dist = ops::sqrt(ops::sum(ops::mul(diff, diff), 1));
  return ops::neg(ops::mean(ops::log(ops::add_scalar(dist, eps))));
}

void ema_update(ParamStore& teacher, const ParamStore& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw Error("EMA momentum must be in [0, 1]");
  if (teacher.size() != student.size()) throw ShapeError("teacher/student parameter sets differ");
  for (auto& [name, t] : teacher) {
    auto it = student.find(name);
    if (it == student.end() || it->second.shape() != t.shape()) {
      throw ShapeError("teacher/student mismatch at '" + name + "'");
    }
    const Tensor& s = it->second;
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = m * t[i] + (1.0 - m) * s[i];
  }
}

Tensor update_center(const Tensor& center, const Tensor& logits, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw Error("center momentum must be in [0, 1]");
  if (logits.rank() != 2 || logits.dim(0) == 0) throw Error("update_center: empty batch");
  if (logits.dim(1) != center.numel()) throw ShapeError("update_center width mismatch");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out(center.shape());
  for (std::size_t j = 0; j < k; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += logits.at(r, j);
    mean /= static_cast<double>(rows);
    out[j] = momentum * center[j] + (1.0 - momentum) * mean;
  }
  return out;
}

}  // namespace advdino::ssl
