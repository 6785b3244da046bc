#pragma once

#include <cstdint>
#include <utility>

#include "nestseg/autodiff.hpp"
#include "nestseg/model.hpp"
#include "nestseg/tensor.hpp"

namespace nestseg {

struct LossWeights {
  std::pair<double, double> pre_switch = {0.8, 1.0};    // (beta1, beta2)
  std::pair<double, double> post_switch = {0.08, 0.1};
  int64_t switch_iteration = 20000;
};

struct LossBreakdown {
  double l_brain = 0;
  double l_ticv = 0;
  double l_pfv = 0;
  double total = 0;
  double beta1 = 0;
  double beta2 = 0;
};

// "first 20K iterations" read as inclusive: pre_switch for
// iteration <= switch_iteration, post_switch after.
std::pair<double, double> beta_schedule(int64_t iteration, const LossWeights& w);

// probs [C, ...] over classes; 1 - mean_c (2*sum(p*t)+s)/(sum p + sum t + s)
ad::Var dice_loss(const ad::Var& probs, const Tensor& target_onehot,
                  double smooth = 1e-5, bool include_background = true);

// softmax over the channel (first) axis of a [C, ...] map
ad::Var softmax_channels(const ad::Var& logits);

// mean of -[t log p + (1-t) log(1-p)], p clamped to [eps, 1-eps]
ad::Var bce_loss(const ad::Var& probs, const Tensor& target, double eps = 1e-7);

struct CompositeLoss {
  ad::Var total;
  LossBreakdown breakdown;
};

// L = L_brain + beta1 * L_TICV + beta2 * L_PFV, where L_brain is Dice over
// the softmaxed class channels and each icv term is Dice + BCE on its
// sigmoid channel.
CompositeLoss composite_loss(const ModelOutput& out, const Tensor& labels_onehot,
                             const Tensor& ticv_target, const Tensor& pfv_target,
                             const LossWeights& w, int64_t iteration,
                             double smooth = 1e-5, bool include_background = true);

}  // namespace nestseg
