#include "dentlab/optim.hpp"

#include <cmath>

namespace dentlab {

void zero_grads(const std::vector<TensorF*>& params) {
  for (auto* p : params) p->zero_grad();
}

float global_grad_norm(const std::vector<TensorF*>& params) {
  double s = 0;
  for (auto* p : params) {
    const float* g = p->grad();
    if (!g) continue;
    for (int64_t i = 0, n = p->numel(); i < n; ++i) s += double(g[i]) * double(g[i]);
  }
  return float(std::sqrt(s));
}

void clip_grad_norm(const std::vector<TensorF*>& params, float max_norm) {
  if (max_norm <= 0.f) return;
  float norm = global_grad_norm(params);
  if (norm <= max_norm) return;
  float scale = max_norm / (norm + 1e-12f);
  for (auto* p : params) {
    float* g = p->grad();
    if (!g) continue;
    for (int64_t i = 0, n = p->numel(); i < n; ++i) g[i] *= scale;
  }
}

void SgdMomentum::step(const std::vector<TensorF*>& params) {
  if (velocity_.size() != params.size()) velocity_.assign(params.size(), {});
  for (size_t pi = 0; pi < params.size(); ++pi) {
    TensorF* p = params[pi];
    const float* g = p->grad();
    if (!g) continue;
    auto& vel = velocity_[pi];
    if (vel.size() != size_t(p->numel())) vel.assign(size_t(p->numel()), 0.f);
    float* w = p->data();
    for (int64_t i = 0, n = p->numel(); i < n; ++i) {
      float gi = g[i] + weight_decay * w[i];
      vel[size_t(i)] = momentum * vel[size_t(i)] + gi;
      w[i] -= lr * vel[size_t(i)];
    }
  }
}

void Adam::step(const std::vector<TensorF*>& params) {
  step(params, std::vector<float>(params.size(), lr));
}

void Adam::step(const std::vector<TensorF*>& params, const std::vector<float>& lrs) {
  if (lrs.size() != params.size()) throw ValueError("adam: one learning rate per parameter group");
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
  }
  ++t_;
  float bc1 = 1.f - std::pow(beta1, float(t_));
  float bc2 = 1.f - std::pow(beta2, float(t_));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    TensorF* p = params[pi];
    const float* g = p->grad();
    if (!g) continue;
    auto& m = m_[pi];
    auto& v = v_[pi];
    if (m.size() != size_t(p->numel())) {
      m.assign(size_t(p->numel()), 0.f);
      v.assign(size_t(p->numel()), 0.f);
    }
    float* w = p->data();
    for (int64_t i = 0, n = p->numel(); i < n; ++i) {
      m[size_t(i)] = beta1 * m[size_t(i)] + (1.f - beta1) * g[i];
      v[size_t(i)] = beta2 * v[size_t(i)] + (1.f - beta2) * g[i] * g[i];
      float mh = m[size_t(i)] / bc1;
      float vh = v[size_t(i)] / bc2;
      w[i] -= lrs[pi] * mh / (std::sqrt(vh) + eps);
    }
  }
}

void Adam::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

}  // namespace dentlab
