#pragma once

// Differentiable tensor operations. Every op validates shapes up front
// (errors name the op and the offending shapes), computes the forward value,
// and records a backward closure on the current tape when any input requires
// grad. Accumulation order inside kernels is fixed, so results and gradients
// are bit-identical for identical inputs regardless of thread count.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <numeric>

#include "dentlab/tensor.hpp"

namespace dentlab {

namespace detail {

// Four-lane accumulation; breaks the FP latency chain while keeping a fixed,
// deterministic summation order.
template <typename T>
T sum_n(const T* p, int64_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += p[i];
    s1 += p[i + 1];
    s2 += p[i + 2];
    s3 += p[i + 3];
  }
  for (; i < n; ++i) s0 += p[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
T dot_n(const T* a, const T* b, int64_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <typename T>
T sumsq_diff_n(const T* p, int64_t n, T mean) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    T d0 = p[i] - mean, d1 = p[i + 1] - mean, d2 = p[i + 2] - mean, d3 = p[i + 3] - mean;
    s0 += d0 * d0;
    s1 += d1 * d1;
    s2 += d2 * d2;
    s3 += d3 * d3;
  }
  for (; i < n; ++i) {
    T d = p[i] - mean;
    s0 += d * d;
  }
  return (s0 + s1) + (s2 + s3);
}

// ---- GEMM kernels. C is M x N; layouts are row-major. ----------------------

// C (+)= A(M,K) * B(K,N)
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool acc) {
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
  for (int64_t i = 0; i < M; ++i) {
    T* crow = C + i * N;
    if (!acc) std::fill(crow, crow + N, T(0));
    const T* arow = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const T a = arow[k];
      const T* brow = B + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

// C (+)= A(M,K) * B(N,K)^T
template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool acc) {
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
  for (int64_t i = 0; i < M; ++i) {
    const T* arow = A + i * K;
    for (int64_t j = 0; j < N; ++j) {
      T s = dot_n(arow, B + j * K, K);
      T* c = C + i * N + j;
      *c = acc ? *c + s : s;
    }
  }
}

// C (+)= A(K,M)^T * B(K,N)
template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool acc) {
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
  for (int64_t i = 0; i < M; ++i) {
    T* crow = C + i * N;
    if (!acc) std::fill(crow, crow + N, T(0));
    for (int64_t k = 0; k < K; ++k) {
      const T a = A[k * M + i];
      const T* brow = B + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

// ---- im2col / col2im for one sample ----------------------------------------

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
        for (int64_t ho = 0; ho < Ho; ++ho) {
          int64_t hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) {
            std::fill(dst + ho * Wo, dst + (ho + 1) * Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            int64_t wi = wo * stride - pad + kj;
            dst[ho * Wo + wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
        for (int64_t ho = 0; ho < Ho; ++ho) {
          int64_t hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) continue;
          T* dst = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            int64_t wi = wo * stride - pad + kj;
            if (wi >= 0 && wi < W) dst[wi] += src[ho * Wo + wo];
          }
        }
      }
    }
  }
}

// ---- broadcasting helpers ---------------------------------------------------

inline std::vector<int64_t> broadcast_shape(const char* op, const std::vector<int64_t>& a,
                                            const std::vector<int64_t>& b) {
  size_t nd = std::max(a.size(), b.size());
  std::vector<int64_t> out(nd);
  for (size_t i = 0; i < nd; ++i) {
    int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` right-aligned into an out-shape of nd dims, 0 on
// broadcast dims.
inline std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& shape, size_t nd) {
  std::vector<int64_t> strides(nd, 0);
  int64_t s = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t src = shape.size() - 1 - i;
    size_t dst = nd - 1 - i;
    strides[dst] = (shape[src] == 1) ? 0 : s;
    s *= shape[src];
  }
  return strides;
}

// Reduces a gradient in out-shape back to in-shape by summing broadcast dims.
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const std::vector<int64_t>& out_shape,
                               const std::vector<int64_t>& in_shape) {
  int64_t n_in = 1;
  for (int64_t d : in_shape) n_in *= d;
  if (int64_t(g.size()) == n_in) return g;  // no broadcast happened
  size_t nd = out_shape.size();
  auto strides = broadcast_strides(in_shape, nd);
  std::vector<T> out(size_t(n_in), T(0));
  std::vector<int64_t> idx(nd, 0);
  for (size_t lin = 0; lin < g.size(); ++lin) {
    int64_t off = 0;
    for (size_t d = 0; d < nd; ++d) off += idx[d] * strides[d];
    out[size_t(off)] += g[lin];
    for (size_t d = nd; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

// Records the backward closure when any input is tracked.
template <typename T, typename Fn>
inline void maybe_record(std::initializer_list<const Tensor<T>*> ins, Tensor<T>& out, Fn&& fn) {
  Tape<T>* tp = Tape<T>::current();
  if (!tp) return;
  bool any = false;
  for (const Tensor<T>* t : ins)
    if (t->requires_grad()) any = true;
  if (!any) return;
  std::vector<int64_t> ids;
  ids.reserve(ins.size());
  for (const Tensor<T>* t : ins) ids.push_back(t->requires_grad() ? tp->ensure_node(*t) : -1);
  tp->record(out, std::move(ids), std::forward<Fn>(fn));
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary_op(const char* name, BinOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  Tensor<T> out;
  if (sa == sb) {
    out = Tensor<T>(sa);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    int64_t n = a.numel();
    switch (op) {
      case BinOp::Add:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case BinOp::Sub:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case BinOp::Mul:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        break;
      case BinOp::Div:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
        break;
    }
  } else {
    auto os = broadcast_shape(name, sa, sb);
    out = Tensor<T>(os);
    size_t nd = os.size();
    auto stra = broadcast_strides(sa, nd);
    auto strb = broadcast_strides(sb, nd);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    std::vector<int64_t> idx(nd, 0);
    int64_t n = out.numel();
    for (int64_t lin = 0; lin < n; ++lin) {
      int64_t oa = 0, ob = 0;
      for (size_t d = 0; d < nd; ++d) {
        oa += idx[d] * stra[d];
        ob += idx[d] * strb[d];
      }
      T va = pa[oa], vb = pb[ob];
      switch (op) {
        case BinOp::Add: po[lin] = va + vb; break;
        case BinOp::Sub: po[lin] = va - vb; break;
        case BinOp::Mul: po[lin] = va * vb; break;
        case BinOp::Div: po[lin] = va / vb; break;
      }
      for (size_t d = nd; d-- > 0;) {
        if (++idx[d] < os[d]) break;
        idx[d] = 0;
      }
    }
  }

  Tensor<T> ac = a, bc = b;
  maybe_record<T>({&a, &b}, out, [ac, bc, op](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    const auto& g = tp.grad_out(self);
    if (ac.shape() == bc.shape()) {
      const T* pa = ac.data();
      const T* pb = bc.data();
      if (in[0] >= 0) {
        auto& ga = tp.grad_buf(in[0]);
        for (size_t i = 0; i < g.size(); ++i) {
          switch (op) {
            case BinOp::Add:
            case BinOp::Sub: ga[i] += g[i]; break;
            case BinOp::Mul: ga[i] += g[i] * pb[i]; break;
            case BinOp::Div: ga[i] += g[i] / pb[i]; break;
          }
        }
      }
      if (in[1] >= 0) {
        auto& gb = tp.grad_buf(in[1]);
        for (size_t i = 0; i < g.size(); ++i) {
          switch (op) {
            case BinOp::Add: gb[i] += g[i]; break;
            case BinOp::Sub: gb[i] -= g[i]; break;
            case BinOp::Mul: gb[i] += g[i] * pa[i]; break;
            case BinOp::Div: gb[i] += -g[i] * pa[i] / (pb[i] * pb[i]); break;
          }
        }
      }
      return;
    }
    auto oshape = detail::broadcast_shape("binop", ac.shape(), bc.shape());
    size_t nd = oshape.size();
    auto stra = detail::broadcast_strides(ac.shape(), nd);
    auto strb = detail::broadcast_strides(bc.shape(), nd);
    const T* pa = ac.data();
    const T* pb = bc.data();
    int64_t n = int64_t(g.size());

    auto expand_grad = [&](bool for_a) {
      std::vector<T> t(g.size());
      std::vector<int64_t> idx(nd, 0);
      for (int64_t lin = 0; lin < n; ++lin) {
        int64_t oa = 0, ob = 0;
        for (size_t d = 0; d < nd; ++d) {
          oa += idx[d] * stra[d];
          ob += idx[d] * strb[d];
        }
        T va = pa[oa], vb = pb[ob];
        switch (op) {
          case BinOp::Add: t[lin] = g[lin]; break;
          case BinOp::Sub: t[lin] = for_a ? g[lin] : -g[lin]; break;
          case BinOp::Mul: t[lin] = for_a ? g[lin] * vb : g[lin] * va; break;
          case BinOp::Div:
            t[lin] = for_a ? g[lin] / vb : -g[lin] * va / (vb * vb);
            break;
        }
        for (size_t d = nd; d-- > 0;) {
          if (++idx[d] < oshape[d]) break;
          idx[d] = 0;
        }
      }
      return t;
    };

    if (in[0] >= 0) {
      auto t = expand_grad(true);
      auto r = detail::reduce_to_shape(t, oshape, ac.shape());
      auto& ga = tp.grad_buf(in[0]);
      for (size_t i = 0; i < r.size(); ++i) ga[i] += r[i];
    }
    if (in[1] >= 0) {
      auto t = expand_grad(false);
      auto r = detail::reduce_to_shape(t, oshape, bc.shape());
      auto& gb = tp.grad_buf(in[1]);
      for (size_t i = 0; i < r.size(); ++i) gb[i] += r[i];
    }
  });
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op("add", detail::BinOp::Add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op("sub", detail::BinOp::Sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op("mul", detail::BinOp::Mul, a, b);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op("div", detail::BinOp::Div, a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename GradFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn fwd, GradFn dfn) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);

  Tensor<T> ac = a, oc = out;
  maybe_record<T>({&a}, out, [ac, oc, dfn](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& ga = tp.grad_buf(in[0]);
    const T* pa = ac.data();
    const T* po = oc.data();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfn(pa[i], po[i]);
  });
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(
      a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op(
      a,
      [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw ValueError("clamp: lo > hi");
  return detail::unary_op(
      a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int64_t> shape) {
  Tensor<T> out = a.with_shape(std::move(shape));
  maybe_record<T>({&a}, out, [](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& ga = tp.grad_buf(in[0]);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

// Zero padding of the two trailing spatial dims of a B x C x H x W tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& a, int64_t pad) {
  if (a.ndim() != 4) throw ShapeError("pad: expected 4-d input, got " + shape_str(a.shape()));
  if (pad < 0) throw ValueError("pad: negative padding");
  int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t Ho = H + 2 * pad, Wo = W + 2 * pad;
  Tensor<T> out({B, C, Ho, Wo});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t h = 0; h < H; ++h)
      std::memcpy(po + (bc * Ho + h + pad) * Wo + pad, pa + (bc * H + h) * W, size_t(W) * sizeof(T));

  maybe_record<T>({&a}, out, [B, C, H, W, Ho, Wo, pad](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& ga = tp.grad_buf(in[0]);
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          ga[size_t((bc * H + h) * W + w)] += g[size_t((bc * Ho + h + pad) * Wo + w + pad)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  const T* pa = a.data();
  for (int64_t i = 0, n = a.numel(); i < n; ++i) s += pa[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  maybe_record<T>({&a}, out, [](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    T g = tp.grad_out(self)[0];
    auto& ga = tp.grad_buf(in[0]);
    for (auto& v : ga) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  int64_t n = a.numel();
  T s = 0;
  const T* pa = a.data();
  for (int64_t i = 0; i < n; ++i) s += pa[i];
  Tensor<T> out = Tensor<T>::scalar(s / T(n));
  maybe_record<T>({&a}, out, [n](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    T g = tp.grad_out(self)[0] / T(n);
    auto& ga = tp.grad_buf(in[0]);
    for (auto& v : ga) v += g;
  });
  return out;
}

// (B, C) -> (1, C)
template <typename T>
Tensor<T> mean_axis0(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("mean_axis0: expected 2-d input, got " + shape_str(a.shape()));
  int64_t B = a.dim(0), C = a.dim(1);
  Tensor<T> out({1, C});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t c = 0; c < C; ++c) {
    T s = 0;
    for (int64_t b = 0; b < B; ++b) s += pa[b * C + c];
    po[c] = s / T(B);
  }
  maybe_record<T>({&a}, out, [B, C](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& ga = tp.grad_buf(in[0]);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) ga[size_t(b * C + c)] += g[size_t(c)] / T(B);
  });
  return out;
}

// (B, L) -> (B, 1)
template <typename T>
Tensor<T> sum_rows_keepdim(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("sum_rows: expected 2-d input, got " + shape_str(a.shape()));
  int64_t B = a.dim(0), L = a.dim(1);
  Tensor<T> out({B, 1});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b) {
    T s = 0;
    for (int64_t l = 0; l < L; ++l) s += pa[b * L + l];
    po[b] = s;
  }
  maybe_record<T>({&a}, out, [B, L](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& ga = tp.grad_buf(in[0]);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t l = 0; l < L; ++l) ga[size_t(b * L + l)] += g[size_t(b)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out({M, N});
  detail::gemm_nn(M, N, K, a.data(), b.data(), out.data(), false);

  Tensor<T> ac = a, bc = b;
  maybe_record<T>({&a, &b}, out, [ac, bc, M, N, K](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    const auto& g = tp.grad_out(self);
    if (in[0] >= 0) {
      std::vector<T> t(size_t(M * K), T(0));
      detail::gemm_nt(M, K, N, g.data(), bc.data(), t.data(), false);
      auto& ga = tp.grad_buf(in[0]);
      for (size_t i = 0; i < t.size(); ++i) ga[i] += t[i];
    }
    if (in[1] >= 0) {
      std::vector<T> t(size_t(K * N), T(0));
      detail::gemm_tn(K, N, M, ac.data(), g.data(), t.data(), false);
      auto& gb = tp.grad_buf(in[1]);
      for (size_t i = 0; i < t.size(); ++i) gb[i] += t[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride = 1, int64_t pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel mismatch between input " + shape_str(x.shape()) + " and kernel " +
                     shape_str(w.shape()));
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " does not fit input " + shape_str(x.shape()));
  int64_t CKK = Ci * kh * kw;

  Tensor<T> out({B, Co, Ho, Wo});
  {
    const T* px = x.data();
    const T* pw = w.data();
    T* po = out.data();
#pragma omp parallel if (B > 1)
    {
      std::vector<T> col(size_t(CKK * Ho * Wo));
#pragma omp for schedule(static)
      for (int64_t b = 0; b < B; ++b) {
        detail::im2col(px + b * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        detail::gemm_nn(Co, Ho * Wo, CKK, pw, col.data(), po + b * Co * Ho * Wo, false);
      }
    }
  }

  Tensor<T> xc = x, wc = w;
  maybe_record<T>({&x, &w}, out,
                  [xc, wc, B, Ci, H, W, Co, kh, kw, Ho, Wo, CKK, stride, pad](
                      Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    const auto& g = tp.grad_out(self);
    const T* px = xc.data();
    const T* pw = wc.data();
    if (in[0] >= 0) {
      auto& gx = tp.grad_buf(in[0]);
      T* pgx = gx.data();
#pragma omp parallel if (B > 1)
      {
        std::vector<T> dcol(size_t(CKK * Ho * Wo));
#pragma omp for schedule(static)
        for (int64_t b = 0; b < B; ++b) {
          detail::gemm_tn(CKK, Ho * Wo, Co, pw, g.data() + b * Co * Ho * Wo, dcol.data(), false);
          detail::col2im_add(dcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo, pgx + b * Ci * H * W);
        }
      }
    }
    if (in[1] >= 0) {
      // direct reduction per weight element; deterministic under the
      // channel-parallel split since each element is owned by one thread
      auto& gw = tp.grad_buf(in[1]);
      T* pgw = gw.data();
#pragma omp parallel for schedule(static) if (Co > 1)
      for (int64_t co = 0; co < Co; ++co) {
        for (int64_t ci = 0; ci < Ci; ++ci) {
          for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
              T s = 0;
              for (int64_t b = 0; b < B; ++b) {
                const T* gb = g.data() + (b * Co + co) * Ho * Wo;
                const T* xb = px + (b * Ci + ci) * H * W;
                for (int64_t ho = 0; ho < Ho; ++ho) {
                  int64_t hi = ho * stride - pad + ki;
                  if (hi < 0 || hi >= H) continue;
                  const T* grow = gb + ho * Wo;
                  const T* xrow = xb + hi * W;
                  if (stride == 1) {
                    int64_t wi0 = -pad + kj;
                    int64_t wo_lo = std::max<int64_t>(0, -wi0);
                    int64_t wo_hi = std::min<int64_t>(Wo, W - wi0);
                    if (wo_hi > wo_lo)
                      s += detail::dot_n(grow + wo_lo, xrow + wi0 + wo_lo, wo_hi - wo_lo);
                  } else {
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                      int64_t wi = wo * stride - pad + kj;
                      if (wi >= 0 && wi < W) s += grow[wo] * xrow[wi];
                    }
                  }
                }
              }
              pgw[((co * Ci + ci) * kh + ki) * kw + kj] += s;
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int64_t k, int64_t stride = -1) {
  if (x.ndim() != 4) throw ShapeError("avgpool2d: expected 4-d input, got " + shape_str(x.shape()));
  if (stride <= 0) stride = k;
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || k > H || k > W)
    throw ShapeError("avgpool2d: window " + std::to_string(k) + " does not fit input " + shape_str(x.shape()));
  int64_t Ho = (H - k) / stride + 1;
  int64_t Wo = (W - k) / stride + 1;
  Tensor<T> out({B, C, Ho, Wo});
  const T* px = x.data();
  T* po = out.data();
  T inv = T(1) / T(k * k);
#pragma omp parallel for schedule(static) if (B * C > 1)
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* xin = px + bc * H * W;
    T* xout = po + bc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho)
      for (int64_t wo = 0; wo < Wo; ++wo) {
        T s = 0;
        for (int64_t i = 0; i < k; ++i)
          for (int64_t j = 0; j < k; ++j) s += xin[(ho * stride + i) * W + wo * stride + j];
        xout[ho * Wo + wo] = s * inv;
      }
  }
  maybe_record<T>({&x}, out, [B, C, H, W, Ho, Wo, k, stride, inv](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& gx = tp.grad_buf(in[0]);
#pragma omp parallel for schedule(static) if (B * C > 1)
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const T* gout = g.data() + bc * Ho * Wo;
      T* gin = gx.data() + bc * H * W;
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          T gv = gout[ho * Wo + wo] * inv;
          for (int64_t i = 0; i < k; ++i)
            for (int64_t j = 0; j < k; ++j) gin[(ho * stride + i) * W + wo * stride + j] += gv;
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Probability / loss ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& z) {
  if (z.ndim() != 2) throw ShapeError("softmax: expected 2-d logits, got " + shape_str(z.shape()));
  int64_t B = z.dim(0), C = z.dim(1);
  Tensor<T> out({B, C});
  const T* pz = z.data();
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b) {
    const T* zr = pz + b * C;
    T* pr = po + b * C;
    T m = zr[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, zr[c]);
    T s = 0;
    for (int64_t c = 0; c < C; ++c) {
      pr[c] = std::exp(zr[c] - m);
      s += pr[c];
    }
    for (int64_t c = 0; c < C; ++c) pr[c] /= s;
  }
  Tensor<T> oc = out;
  maybe_record<T>({&z}, out, [oc, B, C](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& gz = tp.grad_buf(in[0]);
    const T* p = oc.data();
    for (int64_t b = 0; b < B; ++b) {
      T dot = 0;
      for (int64_t c = 0; c < C; ++c) dot += g[size_t(b * C + c)] * p[b * C + c];
      for (int64_t c = 0; c < C; ++c)
        gz[size_t(b * C + c)] += p[b * C + c] * (g[size_t(b * C + c)] - dot);
    }
  });
  return out;
}

// Shannon entropy per probability row; 0*log(0) treated as 0 by clamping
// probabilities to [1e-12, 1] before the log.
template <typename T>
Tensor<T> entropy_rows(const Tensor<T>& p) {
  if (p.ndim() != 2) throw ShapeError("entropy: expected 2-d probabilities, got " + shape_str(p.shape()));
  int64_t B = p.dim(0), C = p.dim(1);
  const T* pp = p.data();
  const T lo = T(1e-12);
  for (int64_t b = 0; b < B; ++b) {
    T s = 0;
    for (int64_t c = 0; c < C; ++c) {
      T v = pp[b * C + c];
      if (v < T(-1e-6))
        throw ValueError("entropy: negative probability in row " + std::to_string(b));
      s += v;
    }
    if (std::abs(double(s) - 1.0) > 1e-5)
      throw ValueError("entropy: row " + std::to_string(b) + " sums to " + std::to_string(double(s)) +
                       ", expected 1 within 1e-5");
  }
  Tensor<T> out({B});
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b) {
    T h = 0;
    for (int64_t c = 0; c < C; ++c) {
      T v = std::min(std::max(pp[b * C + c], lo), T(1));
      h -= v * std::log(v);
    }
    po[b] = h;
  }
  Tensor<T> pc = p;
  maybe_record<T>({&p}, out, [pc, B, C, lo](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& gp = tp.grad_buf(in[0]);
    const T* pp = pc.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        T v = pp[b * C + c];
        if (v > lo && v <= T(1)) gp[size_t(b * C + c)] += g[size_t(b)] * (-(std::log(v) + T(1)));
      }
  });
  return out;
}

// Per-sample cross-entropy from logits: lse(z_b) - z_{b,y_b}.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& z, const std::vector<int>& y) {
  if (z.ndim() != 2) throw ShapeError("cross_entropy: expected 2-d logits, got " + shape_str(z.shape()));
  int64_t B = z.dim(0), C = z.dim(1);
  if (int64_t(y.size()) != B)
    throw ShapeError("cross_entropy: " + std::to_string(y.size()) + " labels for batch of " + std::to_string(B));
  for (int64_t b = 0; b < B; ++b)
    if (y[size_t(b)] < 0 || y[size_t(b)] >= C)
      throw ValueError("cross_entropy: label " + std::to_string(y[size_t(b)]) + " out of range at row " +
                       std::to_string(b));
  Tensor<T> out({B});
  std::vector<T> probs(size_t(B * C));
  const T* pz = z.data();
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b) {
    const T* zr = pz + b * C;
    T m = zr[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, zr[c]);
    T s = 0;
    for (int64_t c = 0; c < C; ++c) {
      probs[size_t(b * C + c)] = std::exp(zr[c] - m);
      s += probs[size_t(b * C + c)];
    }
    for (int64_t c = 0; c < C; ++c) probs[size_t(b * C + c)] /= s;
    po[b] = std::log(s) + m - zr[y[size_t(b)]];
  }
  maybe_record<T>({&z}, out,
                  [probs = std::move(probs), y, B, C](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& gz = tp.grad_buf(in[0]);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        T d = probs[size_t(b * C + c)] - (c == y[size_t(b)] ? T(1) : T(0));
        gz[size_t(b * C + c)] += g[size_t(b)] * d;
      }
  });
  return out;
}

// Difference-of-logits-ratio loss, invariant to positive affine transforms of
// the logits: -(z_y - max_{i != y} z_i) / (z_(1) - z_(3) + 1e-12) with z_(k)
// the k-th largest logit. Requires at least 4 classes.
template <typename T>
Tensor<T> dlr_rows(const Tensor<T>& z, const std::vector<int>& y) {
  if (z.ndim() != 2) throw ShapeError("dlr: expected 2-d logits, got " + shape_str(z.shape()));
  int64_t B = z.dim(0), C = z.dim(1);
  if (C < 4) throw ValueError("dlr: needs at least 4 classes, got " + std::to_string(C));
  if (int64_t(y.size()) != B)
    throw ShapeError("dlr: " + std::to_string(y.size()) + " labels for batch of " + std::to_string(B));
  Tensor<T> out({B});
  // per-row indices used by the backward pass
  const size_t nb = size_t(B);
  std::vector<int> idx_m(nb), idx_p1(nb), idx_p3(nb);
  std::vector<T> nums(nb), dens(nb);
  const T* pz = z.data();
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b) {
    const T* zr = pz + b * C;
    int yb = y[size_t(b)];
    if (yb < 0 || yb >= C) throw ValueError("dlr: label out of range at row " + std::to_string(b));
    int m = yb == 0 ? 1 : 0;
    for (int c = 0; c < C; ++c)
      if (c != yb && zr[c] > zr[m]) m = c;
    // top-3 logit indices
    int p1 = 0;
    for (int c = 1; c < C; ++c)
      if (zr[c] > zr[p1]) p1 = c;
    int p2 = p1 == 0 ? 1 : 0;
    for (int c = 0; c < C; ++c)
      if (c != p1 && zr[c] > zr[p2]) p2 = c;
    int p3 = -1;
    for (int c = 0; c < C; ++c)
      if (c != p1 && c != p2 && (p3 < 0 || zr[c] > zr[p3])) p3 = c;
    T num = zr[yb] - zr[m];
    T den = zr[p1] - zr[p3] + T(1e-12);
    po[b] = -num / den;
    idx_m[size_t(b)] = m;
    idx_p1[size_t(b)] = p1;
    idx_p3[size_t(b)] = p3;
    nums[size_t(b)] = num;
    dens[size_t(b)] = den;
  }
  maybe_record<T>({&z}, out,
                  [y, idx_m = std::move(idx_m), idx_p1 = std::move(idx_p1), idx_p3 = std::move(idx_p3),
                   nums = std::move(nums), dens = std::move(dens), B, C](
                      Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& gz = tp.grad_buf(in[0]);
    for (int64_t b = 0; b < B; ++b) {
      T gb = g[size_t(b)];
      T den = dens[size_t(b)];
      T num = nums[size_t(b)];
      gz[size_t(b * C + y[size_t(b)])] += gb * (-T(1) / den);
      gz[size_t(b * C + idx_m[size_t(b)])] += gb * (T(1) / den);
      T dden = num / (den * den);
      gz[size_t(b * C + idx_p1[size_t(b)])] += gb * dden;
      gz[size_t(b * C + idx_p3[size_t(b)])] += gb * (-dden);
    }
  });
  return out;
}

// Classification margin z_y - max_{i != y} z_i per row; negative means the
// prediction already flipped.
template <typename T>
Tensor<T> margin_rows(const Tensor<T>& z, const std::vector<int>& y) {
  if (z.ndim() != 2) throw ShapeError("margin: expected 2-d logits, got " + shape_str(z.shape()));
  int64_t B = z.dim(0), C = z.dim(1);
  if (int64_t(y.size()) != B)
    throw ShapeError("margin: " + std::to_string(y.size()) + " labels for batch of " + std::to_string(B));
  Tensor<T> out({B});
  std::vector<int> idx_m(size_t(B), 0);
  const T* pz = z.data();
  T* po = out.data();
  for (int64_t b = 0; b < B; ++b) {
    int yb = y[size_t(b)];
    if (yb < 0 || yb >= C) throw ValueError("margin: label out of range at row " + std::to_string(b));
    const T* zr = pz + b * C;
    int m = yb == 0 ? 1 : 0;
    for (int c = 0; c < C; ++c)
      if (c != yb && zr[c] > zr[m]) m = c;
    po[b] = zr[yb] - zr[m];
    idx_m[size_t(b)] = m;
  }
  maybe_record<T>({&z}, out, [y, idx_m = std::move(idx_m), B, C](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    if (in[0] < 0) return;
    const auto& g = tp.grad_out(self);
    auto& gz = tp.grad_buf(in[0]);
    for (int64_t b = 0; b < B; ++b) {
      gz[size_t(b * C + y[size_t(b)])] += g[size_t(b)];
      gz[size_t(b * C + idx_m[size_t(b)])] -= g[size_t(b)];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Separable 1-d convolution along H (axis=2) or W (axis=3) with replicate
// padding (so a kernel that sums to 1 preserves constants exactly); the
// kernel is shared across channels and is (L), (1,L) or (B,L).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sepconv1d(const Tensor<T>& x, const Tensor<T>& k, int axis) {
  if (x.ndim() != 4) throw ShapeError("sepconv1d: expected 4-d input, got " + shape_str(x.shape()));
  if (axis != 2 && axis != 3) throw ValueError("sepconv1d: axis must be 2 or 3");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Bk, L;
  if (k.ndim() == 1) {
    Bk = 1;
    L = k.dim(0);
  } else if (k.ndim() == 2) {
    Bk = k.dim(0);
    L = k.dim(1);
  } else {
    throw ShapeError("sepconv1d: kernel must be 1-d or 2-d, got " + shape_str(k.shape()));
  }
  if (Bk != 1 && Bk != B)
    throw ShapeError("sepconv1d: kernel batch " + shape_str(k.shape()) + " does not match input " +
                     shape_str(x.shape()));
  if (L % 2 == 0) throw ValueError("sepconv1d: kernel length must be odd");
  int64_t r = (L - 1) / 2;

  Tensor<T> out({B, C, H, W});
  const T* px = x.data();
  const T* pk = k.data();
  T* po = out.data();
  int64_t axis_len = axis == 2 ? H : W;
  auto clamp_idx = [axis_len](int64_t q) { return q < 0 ? int64_t(0) : (q >= axis_len ? axis_len - 1 : q); };
#pragma omp parallel for schedule(static) if (B * C > 1)
  for (int64_t bc = 0; bc < B * C; ++bc) {
    int64_t b = bc / C;
    const T* kr = pk + (Bk == 1 ? 0 : b * L);
    const T* xin = px + bc * H * W;
    T* xout = po + bc * H * W;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        int64_t pos = axis == 2 ? h : w;
        T s = 0;
        for (int64_t t = 0; t < L; ++t) {
          int64_t q = clamp_idx(pos + t - r);
          s += kr[t] * (axis == 2 ? xin[q * W + w] : xin[h * W + q]);
        }
        xout[h * W + w] = s;
      }
  }

  Tensor<T> xc = x, kc = k;
  maybe_record<T>({&x, &k}, out,
                  [xc, kc, B, C, H, W, Bk, L, r, axis](Tape<T>& tp, const std::vector<int64_t>& in, int64_t self) {
    const auto& g = tp.grad_out(self);
    const T* px = xc.data();
    const T* pk = kc.data();
    int64_t axis_len = axis == 2 ? H : W;
    auto clamp_idx = [axis_len](int64_t q) { return q < 0 ? int64_t(0) : (q >= axis_len ? axis_len - 1 : q); };
    if (in[0] >= 0) {
      auto& gx = tp.grad_buf(in[0]);
      T* pgx = gx.data();
      // scatter through the same clamped index pattern as the forward pass
#pragma omp parallel for schedule(static) if (B * C > 1)
      for (int64_t bc = 0; bc < B * C; ++bc) {
        int64_t b = bc / C;
        const T* kr = pk + (Bk == 1 ? 0 : b * L);
        const T* gout = g.data() + bc * H * W;
        T* gin = pgx + bc * H * W;
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w) {
            int64_t pos = axis == 2 ? h : w;
            T gv = gout[h * W + w];
            for (int64_t t = 0; t < L; ++t) {
              int64_t q = clamp_idx(pos + t - r);
              if (axis == 2)
                gin[q * W + w] += kr[t] * gv;
              else
                gin[h * W + q] += kr[t] * gv;
            }
          }
      }
    }
    if (in[1] >= 0) {
      auto& gk = tp.grad_buf(in[1]);
#pragma omp parallel for schedule(static) if (L > 1)
      for (int64_t t = 0; t < L; ++t) {
        for (int64_t bc = 0; bc < B * C; ++bc) {
          int64_t b = bc / C;
          const T* gout = g.data() + bc * H * W;
          const T* xin = px + bc * H * W;
          T s = 0;
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
              int64_t pos = axis == 2 ? h : w;
              int64_t q = clamp_idx(pos + t - r);
              s += gout[h * W + w] * (axis == 2 ? xin[q * W + w] : xin[h * W + q]);
            }
          gk[size_t((Bk == 1 ? 0 : b) * L + t)] += s;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable utilities
// ---------------------------------------------------------------------------

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& z) {
  if (z.ndim() != 2) throw ShapeError("argmax_rows: expected 2-d input, got " + shape_str(z.shape()));
  int64_t B = z.dim(0), C = z.dim(1);
  std::vector<int> out(size_t(B), 0);
  const T* pz = z.data();
  for (int64_t b = 0; b < B; ++b) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (pz[b * C + c] > pz[b * C + best]) best = c;
    out[size_t(b)] = best;
  }
  return out;
}

}  // namespace dentlab
