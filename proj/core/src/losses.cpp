#include "nestseg/losses.hpp"

#include <stdexcept>

namespace nestseg {

using ad::Var;

std::pair<double, double> beta_schedule(int64_t iteration, const LossWeights& w) {
  if (iteration < 0) throw std::invalid_argument("beta_schedule: negative iteration");
  return iteration <= w.switch_iteration ? w.pre_switch : w.post_switch;
}

Var softmax_channels(const Var& logits) {
  int64_t C = logits->value.dim(0);
  int64_t V = logits->value.numel() / C;
  auto shape = logits->value.shape();
  Var flat = ad::reshape(logits, {C, V});
  Var sm = ad::softmax_lastdim(ad::permute(flat, {1, 0}));   // [V, C]
  return ad::reshape(ad::permute(sm, {1, 0}), std::move(shape));
}

Var dice_loss(const Var& probs, const Tensor& target_onehot, double smooth,
              bool include_background) {
  if (probs->value.numel() != target_onehot.numel() ||
      probs->value.dim(0) != target_onehot.dim(0))
    throw std::invalid_argument("dice_loss: shape mismatch");
  for (int64_t i = 0; i < probs->value.numel(); ++i)
    if (probs->value[i] < -1e-9 || probs->value[i] > 1 + 1e-9)
      throw std::invalid_argument("dice_loss: probabilities outside [0,1]");
  int64_t C = probs->value.dim(0);
  int64_t V = probs->value.numel() / C;
  Var p = ad::reshape(probs, {C, V});
  Var t = ad::constant(target_onehot.reshaped({C, V}));
  Var inter = ad::sum_lastdim(ad::mul(p, t));  // [C]
  Var psum = ad::sum_lastdim(p);
  Var tsum = ad::sum_lastdim(t);
  Var num = ad::add_scalar(ad::scale(inter, 2.0), smooth);
  Var den = ad::add_scalar(ad::add(psum, tsum), smooth);
  Var dice = ad::div(num, den);  // [C]
  if (!include_background) {
    if (C < 2) throw std::invalid_argument("dice_loss: cannot exclude background");
    auto idx = std::make_shared<std::vector<int64_t>>();
    for (int64_t c = 1; c < C; ++c) idx->push_back(c);
    dice = ad::gather_rows(ad::reshape(dice, {C, 1}), idx);
  }
  return ad::add_scalar(ad::scale(ad::mean_all(dice), -1.0), 1.0);
}

Var bce_loss(const Var& probs, const Tensor& target, double eps) {
  return ad::bce_mean(probs, target, eps);
}

CompositeLoss composite_loss(const ModelOutput& out, const Tensor& labels_onehot,
                             const Tensor& ticv_target, const Tensor& pfv_target,
                             const LossWeights& w, int64_t iteration, double smooth,
                             bool include_background) {
  if (!out.ticv_logit || !out.pfv_logit)
    throw std::invalid_argument("composite_loss: needs finetune-mode model output");
  auto [beta1, beta2] = beta_schedule(iteration, w);

  Var l_brain = dice_loss(softmax_channels(out.brain_logits), labels_onehot, smooth,
                          include_background);
  auto icv_term = [&](const Var& logit, const Tensor& target) {
    Var prob = ad::sigmoid(logit);
    return ad::add(dice_loss(prob, target, smooth), bce_loss(prob, target));
  };
  Var l_ticv = icv_term(out.ticv_logit, ticv_target);
  Var l_pfv = icv_term(out.pfv_logit, pfv_target);

  CompositeLoss r;
  r.total = ad::add(l_brain, ad::add(ad::scale(l_ticv, beta1), ad::scale(l_pfv, beta2)));
  r.breakdown.l_brain = l_brain->value[0];
  r.breakdown.l_ticv = l_ticv->value[0];
  r.breakdown.l_pfv = l_pfv->value[0];
  r.breakdown.total = r.total->value[0];
  r.breakdown.beta1 = beta1;
  r.breakdown.beta2 = beta2;
  return r;
}

}  // namespace nestseg
