#pragma once

#include <span>
#include <vector>

#include "xecg/encoder.hpp"

namespace xecg {

/// Linear warmup over `warmup` steps to `base`, then cosine decay to zero at `total`.
double cosine_lr(double base, std::size_t step, std::size_t warmup, std::size_t total);
/// Linear interpolation from `start` at step 0 to `end` at step `total`.
double linear_ramp(double start, double end, std::size_t step, std::size_t total);

/// Per-tensor learning-rate multiplier decay^(L - layer), L = n_blocks + 1,
/// so the top (pool and heads) trains at the full rate.
std::vector<double> layer_lr_scales(const ParamSet& params, std::size_t n_blocks, double decay);

struct ClipResult {
  double pre_norm = 0.0;
  double post_norm = 0.0;
};

/// Global L2 norm over every gradient tensor.
double global_norm(std::span<const Tensor> grads);
/// Rescales all gradients together when their global norm exceeds max_norm.
ClipResult clip_grad_norm(std::span<Tensor> grads, double max_norm);

/// Adam with decoupled weight decay. Decay is skipped for rank-1 tensors
/// (biases, norms, queries, tokens).
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamSet& layout, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// p -= lr_i * (m_hat / (sqrt(v_hat) + eps) + wd * p), lr_i = lr * scales[i].
  void step(ParamSet& params, std::span<const Tensor> grads, double lr, std::span<const double> scales, double wd);
  std::size_t steps() const { return t_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace xecg
