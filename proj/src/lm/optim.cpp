#include "ctxedit/optim.hpp"

#include <cmath>

namespace ctxedit {

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                 double lr_scale) {
  if (params.size() != grads.size()) throw ShapeError("AdamW: params/grads count differ");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw ShapeError("AdamW: parameter list changed");
  ++t_;
  const double lr = config_.lr * lr_scale;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    if (g.shape() != p.shape()) throw ShapeError("AdamW: gradient shape differs from parameter");
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      p[i] -= lr * config_.weight_decay * p[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

double clip_grad_norm(const std::vector<Tensor*>& grads, double max_norm) {
  double sq = 0;
  for (const Tensor* g : grads) {
    for (double x : g->data()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (Tensor* g : grads) {
      for (double& x : g->data()) x *= s;
    }
  }
  return norm;
}

}  // namespace ctxedit
