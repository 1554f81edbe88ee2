#pragma once

// Layers and small classifier architectures. Batch normalization is a fused
// op with a hand-derived backward for both statistics modes: with batch
// statistics the gradient flows through the mean/variance estimates, which is
// what makes the adapted model differentiable end to end.

#include <optional>
#include <string>

#include "dentlab/ops.hpp"

namespace dentlab {

enum class StatsWrite { None, Ema, Overwrite };

// ---------------------------------------------------------------------------
// Fused 2-d batch normalization.
//
// gamma/beta are (C) for the shared affine or (B,C) for sample-wise affine;
// statistics are always estimated per channel over (B,H,W). When
// use_batch_stats is set, batch estimates normalize the input and are
// optionally written back to mu/var (EMA during training, overwrite when the
// defense estimates test-time statistics); with use_batch_stats off the
// stored mu/var act as constants.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& mu, Tensor<T>& var, T eps, bool use_batch_stats,
                      StatsWrite write = StatsWrite::None, T ema_momentum = T(0.1)) {
  if (x.ndim() != 4) throw ShapeError("batchnorm: expected 4-d input, got " + shape_str(x.shape()));
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  bool samplewise;
  if (gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C) {
    samplewise = false;
  } else if (gamma.ndim() == 2 && gamma.dim(0) == B && gamma.dim(1) == C && beta.ndim() == 2 &&
             beta.dim(0) == B && beta.dim(1) == C) {
    samplewise = true;
  } else {
    throw ShapeError("batchnorm: affine shape " + shape_str(gamma.shape()) + " does not match input " +
                     shape_str(x.shape()));
  }
  if (mu.numel() != C || var.numel() != C)
    throw ShapeError("batchnorm: statistics shape " + shape_str(mu.shape()) + " does not match input " +
                     shape_str(x.shape()));
  if (use_batch_stats && B == 1 && H * W == 1)
    throw ValueError("batchnorm: degenerate variance for batch statistics with B=1 and 1x1 spatial extent");

  int64_t N = B * H * W;
  int64_t HW = H * W;
  const size_t nc = size_t(C);
  std::vector<T> m(nc, T(0)), inv(nc, T(0));
  const T* px = x.data();

  if (use_batch_stats) {
    std::vector<T> v(nc, T(0));
#pragma omp parallel for schedule(static) if (C > 1)
    for (int64_t c = 0; c < C; ++c) {
      T s = 0;
      for (int64_t b = 0; b < B; ++b) s += detail::sum_n(px + (b * C + c) * HW, HW);
      T mc = s / T(N);
      T sv = 0;
      for (int64_t b = 0; b < B; ++b) sv += detail::sumsq_diff_n(px + (b * C + c) * HW, HW, mc);
      m[size_t(c)] = mc;
      v[size_t(c)] = sv / T(N);
      inv[size_t(c)] = T(1) / std::sqrt(v[size_t(c)] + eps);
    }
    if (write == StatsWrite::Ema) {
      T* pm = mu.data();
      T* pv = var.data();
      T unbias = N > 1 ? T(N) / T(N - 1) : T(1);
      for (int64_t c = 0; c < C; ++c) {
        pm[c] = (T(1) - ema_momentum) * pm[c] + ema_momentum * m[size_t(c)];
        pv[c] = (T(1) - ema_momentum) * pv[c] + ema_momentum * v[size_t(c)] * unbias;
      }
    } else if (write == StatsWrite::Overwrite) {
      std::copy(m.begin(), m.end(), mu.data());
      std::copy(v.begin(), v.end(), var.data());
    }
  } else {
    const T* pm = mu.data();
    const T* pv = var.data();
    for (int64_t c = 0; c < C; ++c) {
      if (pv[c] < T(0)) throw ValueError("batchnorm: negative stored variance at channel " + std::to_string(c));
      m[size_t(c)] = pm[c];
      inv[size_t(c)] = T(1) / std::sqrt(pv[c] + eps);
    }
  }

  Tensor<T> out({B, C, H, W});
  // x_hat is kept for the backward pass
  auto xhat = std::make_shared<std::vector<T>>(size_t(B * C * HW));
  {
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    T* ph = xhat->data();
#pragma omp parallel for schedule(static) if (B * C > 1)
    for (int64_t bc = 0; bc < B * C; ++bc) {
      int64_t b = bc / C, c = bc % C;
      T mc = m[size_t(c)], ic = inv[size_t(c)];
      T gm = samplewise ? pg[b * C + c] : pg[c];
      T bt = samplewise ? pb[b * C + c] : pb[c];
      const T* p = px + bc * HW;
      T* o = po + bc * HW;
      T* hh = ph + bc * HW;
      for (int64_t i = 0; i < HW; ++i) {
        T h = (p[i] - mc) * ic;
        hh[i] = h;
        o[i] = gm * h + bt;
      }
    }
  }

  Tensor<T> xc = x, gc = gamma;
  auto minv = std::make_shared<std::vector<T>>(inv);
  maybe_record<T>({&x, &gamma, &beta}, out,
                  [xc, gc, xhat, minv, B, C, HW, N, samplewise, use_batch_stats](
                      Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    const auto& g = tp.grad_out(self);
    const T* ph = xhat->data();
    const T* pinv = minv->data();
    const T* pg = gc.data();

    if (in[1] >= 0) {  // dgamma
      auto& gg = tp.grad_buf(in[1]);
      if (samplewise) {
#pragma omp parallel for schedule(static) if (B * C > 1)
        for (int64_t bc = 0; bc < B * C; ++bc)
          gg[size_t(bc)] += detail::dot_n(g.data() + bc * HW, ph + bc * HW, HW);
      } else {
#pragma omp parallel for schedule(static) if (C > 1)
        for (int64_t c = 0; c < C; ++c) {
          T s = 0;
          for (int64_t b = 0; b < B; ++b)
            s += detail::dot_n(g.data() + (b * C + c) * HW, ph + (b * C + c) * HW, HW);
          gg[size_t(c)] += s;
        }
      }
    }
    if (in[2] >= 0) {  // dbeta
      auto& gb = tp.grad_buf(in[2]);
      if (samplewise) {
#pragma omp parallel for schedule(static) if (B * C > 1)
        for (int64_t bc = 0; bc < B * C; ++bc) gb[size_t(bc)] += detail::sum_n(g.data() + bc * HW, HW);
      } else {
#pragma omp parallel for schedule(static) if (C > 1)
        for (int64_t c = 0; c < C; ++c) {
          T s = 0;
          for (int64_t b = 0; b < B; ++b) s += detail::sum_n(g.data() + (b * C + c) * HW, HW);
          gb[size_t(c)] += s;
        }
      }
    }
    if (in[0] >= 0) {  // dx
      auto& gx = tp.grad_buf(in[0]);
      if (use_batch_stats) {
        // gradient flows through the batch statistics
#pragma omp parallel for schedule(static) if (C > 1)
        for (int64_t c = 0; c < C; ++c) {
          T sum_dh = 0, sum_dhh = 0;
          for (int64_t b = 0; b < B; ++b) {
            int64_t bc = b * C + c;
            T gm = samplewise ? pg[bc] : pg[c];
            const T* gr = g.data() + bc * HW;
            const T* hr = ph + bc * HW;
            sum_dh += gm * detail::sum_n(gr, HW);
            sum_dhh += gm * detail::dot_n(gr, hr, HW);
          }
          T mean_dh = sum_dh / T(N);
          T mean_dhh = sum_dhh / T(N);
          T ic = pinv[size_t(c)];
          for (int64_t b = 0; b < B; ++b) {
            int64_t bc = b * C + c;
            T gm = samplewise ? pg[bc] : pg[c];
            const T* gr = g.data() + bc * HW;
            const T* hr = ph + bc * HW;
            T* gi = gx.data() + bc * HW;
            for (int64_t i = 0; i < HW; ++i)
              gi[i] += ic * (gr[i] * gm - mean_dh - hr[i] * mean_dhh);
          }
        }
      } else {
#pragma omp parallel for schedule(static) if (B * C > 1)
        for (int64_t bc = 0; bc < B * C; ++bc) {
          int64_t b = bc / C, c = bc % C;
          T gm = samplewise ? pg[b * C + c] : pg[c];
          T ic = pinv[size_t(c)];
          const T* gr = g.data() + bc * HW;
          T* gi = gx.data() + bc * HW;
          for (int64_t i = 0; i < HW; ++i) gi[i] += gr[i] * gm * ic;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // (Co, Ci, kh, kw), no bias (BN follows every conv)
  int64_t stride = 1;
  int64_t pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, stride, pad); }
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;            // (C)
  Tensor<T> mu, var;                // (C) statistics
  Tensor<T> gamma_sw, beta_sw;      // (B, C) sample-wise affine, set while expanded
  T eps = T(1e-5);
  T momentum = T(0.1);

  int64_t channels() const { return gamma.ndim() ? gamma.dim(0) : 0; }
  bool samplewise() const { return gamma_sw.defined(); }

  Tensor<T> operator()(const Tensor<T>& x, bool batch_stats, StatsWrite write) {
    const Tensor<T>& g = samplewise() ? gamma_sw : gamma;
    const Tensor<T>& b = samplewise() ? beta_sw : beta;
    return batchnorm2d(x, g, b, mu, var, eps, batch_stats, write, momentum);
  }
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // (out, in)
  Tensor<T> bias;    // (out)

  Tensor<T> operator()(const Tensor<T>& x) const {
    // y(B,out) = x(B,in) . W^T + bias
    if (x.ndim() != 2 || x.dim(1) != weight.dim(1))
      throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                       shape_str(weight.shape()));
    int64_t B = x.dim(0), In = weight.dim(1), Out = weight.dim(0);
    Tensor<T> y({B, Out});
    detail::gemm_nt(B, Out, In, x.data(), weight.data(), y.data(), false);
    {
      T* py = y.data();
      const T* pb = bias.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t o = 0; o < Out; ++o) py[b * Out + o] += pb[o];
    }
    Tensor<T> xc = x, wc = weight;
    maybe_record<T>({&x, &weight, &bias}, y,
                    [xc, wc, B, In, Out](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
      const auto& g = tp.grad_out(self);
      if (in[0] >= 0) {
        auto& gx = tp.grad_buf(in[0]);
        detail::gemm_nn(B, In, Out, g.data(), wc.data(), gx.data(), true);
      }
      if (in[1] >= 0) {
        auto& gw = tp.grad_buf(in[1]);
        detail::gemm_tn(Out, In, B, g.data(), xc.data(), gw.data(), true);
      }
      if (in[2] >= 0) {
        auto& gb = tp.grad_buf(in[2]);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t o = 0; o < Out; ++o) gb[size_t(o)] += g[size_t(b * Out + o)];
      }
    });
    return y;
  }
};

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBn {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
};

template <typename T>
struct ResUnit {
  ConvBn<T> a, b;
  bool has_proj = false;
  ConvBn<T> proj;  // 1x1 conv when shape changes
};

struct BnPass {
  bool batch_stats = false;
  StatsWrite write = StatsWrite::None;
};

inline const std::vector<std::string>& known_archs() {
  static const std::vector<std::string> v{"convnet-bn-small", "resnet-8-bn"};
  return v;
}

template <typename T>
class Model {
 public:
  std::string arch;
  int64_t in_channels = 1;
  int64_t num_classes = 10;
  int64_t input_hw = 28;

  std::vector<ConvBn<T>> blocks;   // convnet-bn-small
  ConvBn<T> stem;                  // resnet-8-bn
  std::vector<ResUnit<T>> units;   // resnet-8-bn
  Linear<T> fc;

  bool is_resnet() const { return arch == "resnet-8-bn"; }

  Tensor<T> forward(const Tensor<T>& x, const BnPass& p) {
    if (x.ndim() != 4 || x.dim(1) != in_channels || x.dim(2) != input_hw || x.dim(3) != input_hw)
      throw ShapeError("model: input " + shape_str(x.shape()) + " does not match expected (B," +
                       std::to_string(in_channels) + "," + std::to_string(input_hw) + "," +
                       std::to_string(input_hw) + ")");
    Tensor<T> h = x;
    if (!is_resnet()) {
      for (size_t i = 0; i < blocks.size(); ++i) {
        h = blocks[i].conv(h);
        h = blocks[i].bn(h, p.batch_stats, p.write);
        h = relu(h);
        if (i + 1 < blocks.size()) h = avgpool2d(h, 2);
      }
    } else {
      h = stem.conv(h);
      h = stem.bn(h, p.batch_stats, p.write);
      h = relu(h);
      for (auto& u : units) {
        Tensor<T> shortcut = h;
        Tensor<T> t = u.a.conv(h);
        t = u.a.bn(t, p.batch_stats, p.write);
        t = relu(t);
        t = u.b.conv(t);
        t = u.b.bn(t, p.batch_stats, p.write);
        if (u.has_proj) {
          shortcut = u.proj.conv(shortcut);
          shortcut = u.proj.bn(shortcut, p.batch_stats, p.write);
        }
        h = relu(add(t, shortcut));
      }
    }
    h = avgpool2d(h, h.dim(2));                      // global average pool
    h = reshape(h, {h.dim(0), h.dim(1)});
    return fc(h);
  }

  std::vector<BatchNorm2d<T>*> bn_layers() {
    std::vector<BatchNorm2d<T>*> out;
    for (auto& b : blocks) out.push_back(&b.bn);
    if (is_resnet()) {
      out.push_back(&stem.bn);
      for (auto& u : units) {
        out.push_back(&u.a.bn);
        out.push_back(&u.b.bn);
        if (u.has_proj) out.push_back(&u.proj.bn);
      }
    }
    return out;
  }

  // Trainable parameters in declaration order (checkpoint order).
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    auto add_block = [&](ConvBn<T>& b) {
      out.push_back(&b.conv.weight);
      out.push_back(&b.bn.gamma);
      out.push_back(&b.bn.beta);
    };
    for (auto& b : blocks) add_block(b);
    if (is_resnet()) {
      add_block(stem);
      for (auto& u : units) {
        add_block(u.a);
        add_block(u.b);
        if (u.has_proj) add_block(u.proj);
      }
    }
    out.push_back(&fc.weight);
    out.push_back(&fc.bias);
    return out;
  }

  // Backbone parameters: everything outside the adaptation set (no BN affine).
  std::vector<Tensor<T>*> backbone_parameters() {
    std::vector<Tensor<T>*> out;
    auto add_block = [&](ConvBn<T>& b) { out.push_back(&b.conv.weight); };
    for (auto& b : blocks) add_block(b);
    if (is_resnet()) {
      add_block(stem);
      for (auto& u : units) {
        add_block(u.a);
        add_block(u.b);
        if (u.has_proj) add_block(u.proj);
      }
    }
    out.push_back(&fc.weight);
    out.push_back(&fc.bias);
    return out;
  }

  // BN statistics buffers in declaration order.
  std::vector<Tensor<T>*> buffers() {
    std::vector<Tensor<T>*> out;
    for (auto* bn : bn_layers()) {
      out.push_back(&bn->mu);
      out.push_back(&bn->var);
    }
    return out;
  }

  uint64_t backbone_checksum() {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto* p : backbone_parameters()) h = fnv1a64(p->data(), size_t(p->numel()) * sizeof(T), h);
    return h;
  }

  Model<T> clone() {
    Model<T> m;
    m.arch = arch;
    m.in_channels = in_channels;
    m.num_classes = num_classes;
    m.input_hw = input_hw;
    m.blocks = blocks;
    m.stem = stem;
    m.units = units;
    m.fc = fc;
    auto deep = [](Tensor<T>& t) {
      if (t.defined()) {
        bool rg = t.requires_grad();
        t = t.clone();
        t.set_requires_grad(rg);
      }
    };
    auto fix_block = [&](ConvBn<T>& b) {
      deep(b.conv.weight);
      deep(b.bn.gamma);
      deep(b.bn.beta);
      deep(b.bn.mu);
      deep(b.bn.var);
      deep(b.bn.gamma_sw);
      deep(b.bn.beta_sw);
    };
    for (auto& b : m.blocks) fix_block(b);
    fix_block(m.stem);
    for (auto& u : m.units) {
      fix_block(u.a);
      fix_block(u.b);
      fix_block(u.proj);
    }
    deep(m.fc.weight);
    deep(m.fc.bias);
    return m;
  }
};

namespace detail {

template <typename T>
ConvBn<T> make_conv_bn(Rng& rng, int64_t ci, int64_t co, int64_t k, int64_t stride, int64_t pad) {
  ConvBn<T> b;
  b.conv.weight = Tensor<T>::param({co, ci, k, k});
  b.conv.stride = stride;
  b.conv.pad = pad;
  T std_ = std::sqrt(T(2) / T(ci * k * k));
  T* w = b.conv.weight.data();
  for (int64_t i = 0, n = b.conv.weight.numel(); i < n; ++i) w[i] = T(rng.normal()) * std_;
  b.bn.gamma = Tensor<T>::param({co}, T(1));
  b.bn.beta = Tensor<T>::param({co}, T(0));
  b.bn.mu = Tensor<T>({co}, T(0));
  b.bn.var = Tensor<T>({co}, T(1));
  return b;
}

}  // namespace detail

template <typename T>
Model<T> build_model(const std::string& arch, int64_t num_classes, uint64_t seed, int64_t in_channels = 1,
                     int64_t input_hw = 28) {
  if (num_classes < 2) throw ValueError("build_model: num_classes must be >= 2");
  bool known = false;
  for (const auto& a : known_archs()) known = known || a == arch;
  if (!known) {
    std::string names;
    for (const auto& a : known_archs()) names += (names.empty() ? "" : ", ") + a;
    throw ValueError("build_model: unknown arch '" + arch + "', valid: " + names);
  }
  Rng rng(splitmix64(seed ^ 0x6d656e74ULL));
  Model<T> m;
  m.arch = arch;
  m.in_channels = in_channels;
  m.num_classes = num_classes;
  m.input_hw = input_hw;
  int64_t feat;
  if (arch == "convnet-bn-small") {
    m.blocks.push_back(detail::make_conv_bn<T>(rng, in_channels, 8, 3, 1, 1));
    m.blocks.push_back(detail::make_conv_bn<T>(rng, 8, 16, 3, 1, 1));
    m.blocks.push_back(detail::make_conv_bn<T>(rng, 16, 16, 3, 1, 1));
    feat = 16;
  } else {
    m.stem = detail::make_conv_bn<T>(rng, in_channels, 16, 3, 1, 1);
    auto unit = [&](int64_t ci, int64_t co, int64_t stride) {
      ResUnit<T> u;
      u.a = detail::make_conv_bn<T>(rng, ci, co, 3, stride, 1);
      u.b = detail::make_conv_bn<T>(rng, co, co, 3, 1, 1);
      if (ci != co || stride != 1) {
        u.has_proj = true;
        u.proj = detail::make_conv_bn<T>(rng, ci, co, 1, stride, 0);
      }
      return u;
    };
    m.units.push_back(unit(16, 16, 1));
    m.units.push_back(unit(16, 32, 2));
    m.units.push_back(unit(32, 32, 2));
    feat = 32;
  }
  m.fc.weight = Tensor<T>::param({num_classes, feat});
  m.fc.bias = Tensor<T>::param({num_classes}, T(0));
  T std_ = std::sqrt(T(1) / T(feat));
  T* w = m.fc.weight.data();
  for (int64_t i = 0, n = m.fc.weight.numel(); i < n; ++i) w[i] = T(rng.normal()) * std_;
  return m;
}

}  // namespace dentlab
