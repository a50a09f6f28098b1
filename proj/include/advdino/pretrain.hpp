#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "advdino/adversary.hpp"
#include "advdino/augment.hpp"
#include "advdino/checkpoint.hpp"
#include "advdino/ssl.hpp"
#include "advdino/vit.hpp"

namespace advdino::train {

struct PretrainConfig {
  vit::EncoderConfig encoder;
  ssl::HeadConfig head;
  aug::AugmentConfig augment;
  adv::LossWeights weights;
  std::vector<std::size_t> disc_hidden{256, 128};
  double disc_lr_scale = 10.0;  // discriminator lr relative to the encoder's
  // Extra discriminator-only updates per step on a queue of recent detached
  // crop embeddings (the last disc_queue_batches batches).
  std::size_t disc_extra_steps = 0;
  std::size_t disc_queue_batches = 8;
  double koleo_weight = 0.1;
  double koleo_eps = 1e-4;
  std::size_t batch_size = 16;
  std::size_t steps = 600;
  std::size_t warmup_steps = 60;
  double lr = 5e-4;
  double min_lr = 1e-5;
  double weight_decay = 0.04;
  double ema_start = 0.992;
  double ema_end = 1.0;
  bool adapt_patch_embed = true;  // init from a channel-adapted 3-channel kernel
  std::size_t log_every = 50;

  static PretrainConfig paper();
  void validate() const;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double ema_momentum = 0.0;
  double distill = 0.0;
  double mim = 0.0;
  double adv = 0.0;
  double koleo = 0.0;
  double total = 0.0;
  double disc_accuracy = 0.0;  // on this batch's crops; 0 when no discriminator
  double adv_ssl_ratio = 0.0;  // lambda_adv * L_adv / (L_distill + L_MIM)
};

struct PretrainState {
  ParamStore student_encoder, student_head;
  ParamStore teacher_encoder, teacher_head;
  ParamStore discriminator;  // empty when lambda_adv = 0
  Tensor cls_center, patch_center;
  std::vector<StepLog> curve;

  // Flat store with "student.encoder.", "teacher.encoder.", ... prefixes.
  ParamStore checkpoint() const;
  static PretrainState from_checkpoint(const ParamStore& flat);
};

// Tiles are normalized [C, S, S] tensors; domains[i] is the slide index of tile i.
PretrainState pretrain(std::span<const Tensor> tiles, std::span<const std::size_t> domains, std::size_t num_domains,
                       const PretrainConfig& config, std::uint64_t seed,
                       const std::function<void(const StepLog&)>& on_log = {});

// Teacher CLS embedding of each full tile resampled to the global crop size.
std::vector<std::vector<double>> embed_tiles(std::span<const Tensor> tiles, const ParamStore& teacher_encoder,
                                             const vit::EncoderConfig& config);

std::string curve_csv(const std::vector<StepLog>& curve);

}  // namespace advdino::train
