#pragma once

#include <vector>

#include "ssctl/tensor.hpp"

namespace ssctl {

/// Adam with bias correction. Moment slots are positional: the caller must
/// pass the same parameter list, in the same order, on every step.
struct AdamState {
  struct Slot {
    Tensor m;
    Tensor v;
  };
  std::vector<Slot> slots;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One update step; grads are zeroed afterwards. Aborts on non-finite grads.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr);

/// Numerically stable binary cross-entropy on the logit.
double bce_loss(double logit, int label);
/// d bce / d logit = sigmoid(logit) - label.
double bce_grad(double logit, int label);

}  // namespace ssctl
