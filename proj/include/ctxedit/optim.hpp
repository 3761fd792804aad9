#pragma once

#include <cstddef>
#include <vector>

#include "ctxedit/tensor.hpp"

namespace ctxedit {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Moment buffers are created on the first
// step and tied to the position of each tensor in the list.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  // `lr_scale` multiplies the configured learning rate for this step only.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
            double lr_scale = 1.0);

  std::size_t steps() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Rescales the gradients in place so their joint L2 norm is at most
// `max_norm`; returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor*>& grads, double max_norm);

}  // namespace ctxedit
