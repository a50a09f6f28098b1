#pragma once

#include <cstdint>

#include "advdino/checkpoint.hpp"

namespace advdino {

// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Config {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Config config) : config_(config) {}

  // Updates every parameter that has an entry in `grads`.
  void step(ParamStore& params, const ParamStore& grads, double lr);

  std::uint64_t steps() const { return step_; }
  // Moment buffers as "m/<name>", "v/<name>" plus a "t" scalar.
  ParamStore state() const;
  void load_state(const ParamStore& state);

 private:
  Config config_;
  ParamStore m_;
  ParamStore v_;
  std::uint64_t step_ = 0;
};

// Linear warmup then cosine decay from base to final value.
double warmup_cosine(double base, double final_value, std::size_t warmup, std::size_t total, std::size_t step);
// Cosine ramp from start to end over total steps.
double cosine_ramp(double start, double end, std::size_t total, std::size_t step);

}  // namespace advdino
