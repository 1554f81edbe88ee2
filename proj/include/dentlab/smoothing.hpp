#pragma once

// Learnable Gaussian input smoothing. The width Sigma is stored as an
// unconstrained raw parameter mapped through sigma = relu(softplus(raw) -
// softplus(0)), so nonnegativity is structural and sigma = 0 (the identity
// transform) is reachable under gradient steps. The kernel radius is
// recomputed from the current width on every call, capped for cost.

#include "dentlab/ops.hpp"

namespace dentlab {

template <typename T>
struct SmoothingParams {
  Tensor<T> raw;  // (1) shared or (B) per-sample, requires_grad
  int64_t radius_cap = 7;
  bool per_sample = false;

  static T sigma_of_raw(T s) {
    T sp = s > T(0) ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
    T v = sp - T(M_LN2);
    return v > T(0) ? v : T(0);
  }
  static T raw_of_sigma(T sigma) {
    if (sigma < T(0)) throw ValueError("smoothing: sigma must be nonnegative");
    // inverse of softplus(raw) - ln 2 for sigma >= 0
    return T(std::log(2.0 * std::exp(double(sigma)) - 1.0));
  }

  void init(T sigma0, int64_t batch = 1) {
    if (sigma0 < T(0)) throw ValueError("smoothing: sigma must be nonnegative");
    int64_t n = per_sample ? batch : 1;
    raw = Tensor<T>::param({n}, raw_of_sigma(sigma0));
  }

  bool defined() const { return raw.defined(); }

  T sigma_value(int64_t b = 0) const { return sigma_of_raw(raw.data()[per_sample ? b : 0]); }

  T sigma_mean() const {
    T s = 0;
    for (int64_t i = 0; i < raw.numel(); ++i) s += sigma_of_raw(raw.data()[i]);
    return s / T(raw.numel());
  }

  T sigma_max() const {
    T m = 0;
    for (int64_t i = 0; i < raw.numel(); ++i) m = std::max(m, sigma_of_raw(raw.data()[i]));
    return m;
  }

  int64_t radius() const {
    return std::min<int64_t>(radius_cap, int64_t(std::ceil(3.0 * double(sigma_max()))));
  }
};

// Depthwise smoothing as two separable 1-d passes with a normalized Gaussian
// kernel; differentiable w.r.t. both the input and the width. sigma = 0
// returns the input unchanged.
template <typename T>
Tensor<T> gaussian_smooth(const Tensor<T>& x, const SmoothingParams<T>& p) {
  if (!p.defined()) throw ValueError("smoothing: parameters not initialized");
  if (x.ndim() != 4) throw ShapeError("smoothing: expected 4-d input, got " + shape_str(x.shape()));
  if (p.per_sample && p.raw.dim(0) != x.dim(0))
    throw ShapeError("smoothing: per-sample width " + shape_str(p.raw.shape()) + " does not match batch " +
                     shape_str(x.shape()));

  int64_t r = p.radius();
  if (r == 0) return x;  // exact identity
  int64_t L = 2 * r + 1;

  // sigma = relu(softplus(raw) - ln 2), built on the tape
  Tensor<T> sig = relu(add_scalar(softplus(p.raw), T(-M_LN2)));
  int64_t Bk = sig.dim(0);

  Tensor<T> pos2({1, L});
  for (int64_t i = 0; i < L; ++i) pos2.data()[i] = T((i - r) * (i - r));

  Tensor<T> sig2 = reshape(mul(sig, sig), {Bk, 1});
  Tensor<T> den = add_scalar(mul_scalar(sig2, T(2)), T(1e-12));
  Tensor<T> kraw = exp(neg(div(pos2, den)));          // (Bk, L)
  Tensor<T> kernel = div(kraw, sum_rows_keepdim(kraw));  // rows sum to 1

  Tensor<T> h = sepconv1d(x, kernel, 2);
  return sepconv1d(h, kernel, 3);
}

}  // namespace dentlab
