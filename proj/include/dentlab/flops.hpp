#pragma once

// Analytic FLOP model with per-layer closed forms. Backward passes are
// counted as twice the forward cost; optimizer updates add a small
// per-parameter constant.

#include "dentlab/nn.hpp"

namespace dentlab {

namespace flops {

inline double conv(int64_t B, int64_t Ci, int64_t Co, int64_t k, int64_t Ho, int64_t Wo) {
  return 2.0 * double(B) * double(Co) * double(Ho) * double(Wo) * double(Ci) * double(k) * double(k);
}
inline double batchnorm(int64_t B, int64_t C, int64_t H, int64_t W) {
  return 8.0 * double(B) * double(C) * double(H) * double(W);
}
inline double relu_cost(int64_t numel) { return double(numel); }
inline double avgpool(int64_t B, int64_t C, int64_t H, int64_t W) {
  return double(B) * double(C) * double(H) * double(W);
}
inline double linear(int64_t B, int64_t in, int64_t out) {
  return 2.0 * double(B) * double(in) * double(out) + double(B) * double(out);
}
inline double softmax(int64_t B, int64_t C) { return 5.0 * double(B) * double(C); }
inline double smoothing(int64_t B, int64_t C, int64_t H, int64_t W, int64_t radius) {
  int64_t L = 2 * radius + 1;
  return 2.0 * 2.0 * double(B) * double(C) * double(H) * double(W) * double(L);
}
inline double adam_update(int64_t nparams) { return 12.0 * double(nparams); }

}  // namespace flops

// Forward cost of one model pass for a batch of B.
inline double model_forward_flops(Model<float>& m, int64_t B) {
  double total = 0;
  int64_t H = m.input_hw, W = m.input_hw;
  auto conv_bn_relu = [&](ConvBn<float>& blk, int64_t& h, int64_t& w) {
    int64_t Ci = blk.conv.weight.dim(1), Co = blk.conv.weight.dim(0), k = blk.conv.weight.dim(2);
    int64_t ho = (h + 2 * blk.conv.pad - k) / blk.conv.stride + 1;
    int64_t wo = (w + 2 * blk.conv.pad - k) / blk.conv.stride + 1;
    total += flops::conv(B, Ci, Co, k, ho, wo);
    total += flops::batchnorm(B, Co, ho, wo);
    total += flops::relu_cost(B * Co * ho * wo);
    h = ho;
    w = wo;
    return Co;
  };
  int64_t feat = 0;
  if (!m.is_resnet()) {
    for (size_t i = 0; i < m.blocks.size(); ++i) {
      feat = conv_bn_relu(m.blocks[i], H, W);
      if (i + 1 < m.blocks.size()) {
        total += flops::avgpool(B, feat, H, W);
        H /= 2;
        W /= 2;
      }
    }
  } else {
    feat = conv_bn_relu(m.stem, H, W);
    for (auto& u : m.units) {
      int64_t h = H, w = W;
      feat = conv_bn_relu(u.a, h, w);
      int64_t h2 = h, w2 = w;
      conv_bn_relu(u.b, h2, w2);
      if (u.has_proj) {
        int64_t hp = H, wp = W;
        conv_bn_relu(u.proj, hp, wp);
      }
      H = h2;
      W = w2;
      total += double(B * feat * H * W);  // residual add
    }
  }
  total += flops::avgpool(B, feat, H, W);
  total += flops::linear(B, feat, m.num_classes);
  return total;
}

// Analytic cost of a defended prediction with `steps` adaptation iterations:
// steps * (forward + backward + update) + one final forward. Backward is 2x
// forward.
inline double defense_flops(Model<float>& m, int64_t B, int steps, bool with_smoothing,
                            int64_t smoothing_radius, int64_t adapted_params) {
  double fwd = model_forward_flops(m, B);
  if (with_smoothing)
    fwd += flops::smoothing(B, m.in_channels, m.input_hw, m.input_hw, smoothing_radius);
  fwd += flops::softmax(B, m.num_classes);
  double per_step = 3.0 * fwd + flops::adam_update(adapted_params);
  return double(steps) * per_step + fwd;
}

}  // namespace dentlab
