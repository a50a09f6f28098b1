#include "advdino/optim.hpp"

#include <cmath>
#include <numbers>

namespace advdino {

void AdamW::step(ParamStore& params, const ParamStore& grads, double lr) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (p.shape() != g.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
    auto [mit, m_new] = m_.try_emplace(name, p.shape(), 0.0);
    auto [vit, v_new] = v_.try_emplace(name, p.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      double mhat = m[i] / c1;
      double vhat = v[i] / c2;
      p[i] -= lr * config_.weight_decay * p[i];
      p[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

ParamStore AdamW::state() const {
  ParamStore out;
  merge_with_prefix(out, m_, "m/");
  merge_with_prefix(out, v_, "v/");
  out["t"] = Tensor::scalar(static_cast<double>(step_));
  return out;
}

void AdamW::load_state(const ParamStore& state) {
  m_ = with_prefix_stripped(state, "m/");
  v_ = with_prefix_stripped(state, "v/");
  auto it = state.find("t");
  step_ = it == state.end() ? 0 : static_cast<std::uint64_t>(it->second.item());
}

double warmup_cosine(double base, double final_value, std::size_t warmup, std::size_t total, std::size_t step) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  progress = std::min(progress, 1.0);
  return final_value + 0.5 * (base - final_value) * (1.0 + std::cos(std::numbers::pi * progress));
}

double cosine_ramp(double start, double end, std::size_t total, std::size_t step) {
  if (total == 0) return end;
  double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return end - (end - start) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace advdino
