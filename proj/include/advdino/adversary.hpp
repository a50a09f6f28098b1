#pragma once

#include <random>
#include <span>
#include <vector>

#include "advdino/checkpoint.hpp"
#include "advdino/graph.hpp"
#include "advdino/module.hpp"

namespace advdino::adv {

// Identity forward; the backward pass multiplies the upstream gradient by -1.
Var grad_reverse(Var x);

struct DiscriminatorConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden = {256, 128};
  std::size_t num_domains = 2;

  void validate() const;
};

ParamStore init_discriminator(const DiscriminatorConfig& config, std::mt19937_64& rng);

// D -> hidden... (ReLU) -> num_domains logits. x is [R, D].
Var discriminator_logits(Var x, const Bound& params, const DiscriminatorConfig& config);
// Softmax of the logits: per-row domain probabilities.
Var discriminator_forward(Var x, const Bound& params, const DiscriminatorConfig& config);

// (1 / (B N)) sum over crops of CE(softmax(logits_r), labels_r). Each crop is
// classified independently; logits is [B*N, num_domains].
Var adversarial_loss(Var logits, std::span<const std::size_t> labels, std::size_t batch, std::size_t crops);

struct LossWeights {
  double distill = 1.0;
  double mim = 1.0;
  double adv = 50.0;

  void validate() const;
};

Var total_loss(Var distill, Var mim, Var adv, const LossWeights& weights);
double total_loss(double distill, double mim, double adv, const LossWeights& weights);

}  // namespace advdino::adv
