#include "advdino/adversary.hpp"

#include <cmath>
#include <string>

namespace advdino::adv {

Var grad_reverse(Var x) {
  return x.graph->apply(
      "grad_reverse", {x}, [](std::span<const Tensor* const> in) { return *in[0]; },
      [](const BackwardArgs& a) {
        if (!a.grad_inputs[0]) return;
        auto dst = a.grad_inputs[0]->values();
        auto src = a.grad_output.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
      });
}

void DiscriminatorConfig::validate() const {
  if (input_dim == 0 || num_domains < 2) throw Error("discriminator needs a positive input width and >= 2 domains");
  for (auto h : hidden)
    if (h == 0) throw Error("discriminator hidden widths must be positive");
}

ParamStore init_discriminator(const DiscriminatorConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ParamStore p;
  std::size_t in = cfg.input_dim;
  for (std::size_t i = 0; i <= cfg.hidden.size(); ++i) {
    const std::size_t out = i < cfg.hidden.size() ? cfg.hidden[i] : cfg.num_domains;
    const std::string layer = "layers." + std::to_string(i) + ".";
    p[layer + "weight"] = trunc_normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    p[layer + "bias"] = Tensor(Shape{out}, 0.0);
    in = out;
  }
  return p;
}

Var discriminator_logits(Var x, const Bound& params, const DiscriminatorConfig& cfg) {
  if (x.shape().back() != cfg.input_dim) {
    throw ShapeError("discriminator input width " + std::to_string(x.shape().back()) + " != " +
                     std::to_string(cfg.input_dim));
  }
  Var h = x;
  for (std::size_t i = 0; i <= cfg.hidden.size(); ++i) {
    const std::string layer = "layers." + std::to_string(i) + ".";
    h = linear(h, params[layer + "weight"], params[layer + "bias"]);
    if (i < cfg.hidden.size()) h = ops::relu(h);
  }
  return h;
}

Var discriminator_forward(Var x, const Bound& params, const DiscriminatorConfig& cfg) {
  return ops::softmax(discriminator_logits(x, params, cfg));
}

Var adversarial_loss(Var logits, std::span<const std::size_t> labels, std::size_t batch, std::size_t crops) {
  const Shape s = logits.shape();
  if (s.size() != 2) throw ShapeError("adversarial_loss expects [B*N, domains] logits");
  if (batch * crops == 0 || s[0] != batch * crops || labels.size() != s[0]) {
    throw ShapeError("adversarial_loss: expected " + std::to_string(batch * crops) + " predictions and labels, got " +
                     std::to_string(s[0]) + " / " + std::to_string(labels.size()));
  }
  Tensor onehot(s, 0.0);
  for (std::size_t r = 0; r < s[0]; ++r) {
    if (labels[r] >= s[1]) throw Error("domain label " + std::to_string(labels[r]) + " out of range");
    onehot.at(r, labels[r]) = 1.0;
  }
  Graph& g = *logits.graph;
  Var picked = ops::sum(ops::mul(g.constant(std::move(onehot)), ops::log_softmax(logits)));
  return ops::scale(picked, -1.0 / static_cast<double>(s[0]));
}

void LossWeights::validate() const {
  for (double w : {distill, mim, adv})
    if (!std::isfinite(w) || w < 0.0) throw Error("loss weights must be finite and non-negative");
}

Var total_loss(Var distill, Var mim, Var adv, const LossWeights& w) {
  w.validate();
  for (Var v : {distill, mim, adv})
    if (!std::isfinite(v.value().item())) throw Error("total_loss: non-finite component");
  return ops::add(ops::add(ops::scale(distill, w.distill), ops::scale(mim, w.mim)), ops::scale(adv, w.adv));
}

double total_loss(double distill, double mim, double adv, const LossWeights& w) {
  w.validate();
  for (double v : {distill, mim, adv})
    if (!std::isfinite(v)) throw Error("total_loss: non-finite component");
  return w.distill * distill + w.mim * mim + w.adv * adv;
}

}  // namespace advdino::adv
