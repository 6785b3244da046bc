#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "nestseg/tensor.hpp"

namespace nestseg::ad {

struct Node;
using Var = std::shared_ptr<Node>;

// One tape node. `backprop` reads this node's grad and accumulates into the
// parents' grads. Nodes built while grads are disabled (or from constant
// inputs) carry no parents, so intermediate values free as soon as the last
// reference drops.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

// RAII guard disabling tape construction (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

Var constant(Tensor v);
Var leaf(Tensor v);  // trainable parameter

// Reverse-mode sweep from a scalar root (numel == 1).
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var gelu(const Var& a);
Var sigmoid(const Var& a);

// ---- linear algebra ----
// a: [N,K] x b: [K,M] -> [N,M]
Var matmul(const Var& a, const Var& b);
// a: [B,N,K] x b: [B,K,M] -> [B,N,M]
Var bmm(const Var& a, const Var& b);
// a: [B,N,K] x b: [B,M,K] -> [B,N,M]   (b transposed)
Var bmm_nt(const Var& a, const Var& b);
// x: [N,C] + bias [C]
Var add_rowbias(const Var& x, const Var& b);

// ---- shape ----
Var reshape(const Var& a, std::vector<int64_t> shape);
Var permute(const Var& a, const std::vector<int>& perm);
// out[i,:] = x[index[i],:]; index is a bijection or general gather
Var gather_rows(const Var& x, std::shared_ptr<const std::vector<int64_t>> index);
// concat along dim 0
Var concat0(const Var& a, const Var& b);

// ---- normalization / attention ----
Var softmax_lastdim(const Var& a);
Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta,
                      double eps = 1e-5);

// ---- spatial (channel-first volumes [C,X,Y,Z]) ----
Var conv3d(const Var& x, const Var& w, const Var& b, int pad);
Var conv1x1(const Var& x, const Var& w, const Var& b);  // w: [Cout,Cin]
Var maxpool2(const Var& x);
Var upsample_nearest2(const Var& x);

// ---- reductions ----
Var sum_all(const Var& a);       // -> [1]
Var mean_all(const Var& a);      // -> [1]
Var sum_lastdim(const Var& a);   // [C,N] -> [C]

// BCE on probabilities, clamped to [eps, 1-eps]; mean over voxels -> [1].
Var bce_mean(const Var& probs, const Tensor& target, double eps = 1e-7);

}  // namespace nestseg::ad
