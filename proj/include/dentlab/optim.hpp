#pragma once

#include <vector>

#include "dentlab/tensor.hpp"

namespace dentlab {

using TensorF = Tensor<float>;

void zero_grads(const std::vector<TensorF*>& params);

float global_grad_norm(const std::vector<TensorF*>& params);

// Scales gradients so their global L2 norm is at most max_norm (no-op when
// max_norm <= 0).
void clip_grad_norm(const std::vector<TensorF*>& params, float max_norm);

struct SgdMomentum {
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 0.f;

  void step(const std::vector<TensorF*>& params);
  void reset() { velocity_.clear(); }

 private:
  std::vector<std::vector<float>> velocity_;
};

// Adam with optional per-parameter learning rates (the defense uses one rate
// for the normalization affine and another for the smoothing width).
struct Adam {
  float lr = 0.001f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  void step(const std::vector<TensorF*>& params);
  void step(const std::vector<TensorF*>& params, const std::vector<float>& lrs);
  void reset();

  int64_t t() const { return t_; }

 private:
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace dentlab
