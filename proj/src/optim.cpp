#include "xecg/optim.hpp"

#include <cmath>

namespace xecg {

double cosine_lr(double base, std::size_t step, std::size_t warmup, std::size_t total) {
  if (total == 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  const double span = static_cast<double>(total - warmup);
  const double frac = static_cast<double>(step - warmup) / span;
  return 0.5 * base * (1.0 + std::cos(M_PI * frac));
}

double linear_ramp(double start, double end, std::size_t step, std::size_t total) {
  if (total == 0) return end;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return start + f * (end - start);
}

std::vector<double> layer_lr_scales(const ParamSet& params, std::size_t n_blocks, double decay) {
  std::vector<double> out(params.size());
  const std::size_t top = n_blocks + 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t layer = std::min(param_layer(params.name(i), n_blocks), top);
    out[i] = std::pow(decay, static_cast<double>(top - layer));
  }
  return out;
}

double global_norm(std::span<const Tensor> grads) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) ss += v * v;
  return std::sqrt(ss);
}

ClipResult clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  ClipResult r;
  r.pre_norm = global_norm(grads);
  if (std::isfinite(r.pre_norm) && r.pre_norm > max_norm) {
    const double s = max_norm / r.pre_norm;
    for (auto& g : grads)
      for (double& v : g.values()) v *= s;
    r.post_norm = global_norm(grads);
  } else {
    r.post_norm = r.pre_norm;
  }
  return r;
}

AdamW::AdamW(const ParamSet& layout, double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (std::size_t i = 0; i < layout.size(); ++i) {
    m_.emplace_back(layout.value(i).shape());
    v_.emplace_back(layout.value(i).shape());
  }
}

void AdamW::step(ParamSet& params, std::span<const Tensor> grads, double lr, std::span<const double> scales,
                 double wd) {
  if (params.size() != m_.size() || grads.size() != m_.size() || scales.size() != m_.size())
    throw ContractError("AdamW: parameter, gradient and scale counts differ");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    Tensor& p = params.value(i);
    if (grads[i].size() != p.size()) throw ShapeError("AdamW: gradient shape mismatch for " + params.name(i));
    const double li = lr * scales[i];
    const double decay = p.rank() >= 2 ? wd : 0.0;
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double* g = grads[i].data();
    double* w = p.data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double upd = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      w[j] -= li * (upd + decay * w[j]);
    }
  }
}

}  // namespace xecg
