#include <cstring>
#include <fstream>

#include "dentlab/checkpoint.hpp"
#include "dentlab/data.hpp"
#include "dentlab/nn.hpp"
#include "dentlab/smoothing.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace dentlab;

namespace {

template <typename T>
Tensor<T> randn(Rng& rng, std::vector<int64_t> shape, double scale = 1.0) {
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = T(rng.normal() * scale);
  return t;
}

}  // namespace

TEST_CASE("batchnorm with batch stats is an identity on standardized input") {
  // per-channel zero-mean unit-variance input, gamma=1, beta=0
  Rng rng(3);
  int64_t B = 4, C = 3, H = 5, W = 5;
  Tensor<float> x = randn<float>(rng, {B, C, H, W});
  // standardize each channel exactly
  int64_t N = B * H * W;
  for (int64_t c = 0; c < C; ++c) {
    double m = 0, v = 0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < H * W; ++i) m += x.data()[(b * C + c) * H * W + i];
    m /= double(N);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < H * W; ++i) {
        double d = x.data()[(b * C + c) * H * W + i] - m;
        v += d * d;
      }
    v /= double(N);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < H * W; ++i) {
        float& p = x.data()[(b * C + c) * H * W + i];
        p = float((p - m) / std::sqrt(v));
      }
  }
  Tensor<float> gamma({C}, 1.f), beta({C}, 0.f), mu({C}, 0.f), var({C}, 1.f);
  auto y = batchnorm2d(x, gamma, beta, mu, var, 1e-5f, true);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(y.data()[i] - x.data()[i]) < 1e-4f);
}

TEST_CASE("batchnorm gamma=0 collapses to beta") {
  Rng rng(5);
  Tensor<float> x = randn<float>(rng, {2, 3, 4, 4});
  Tensor<float> gamma({3}, 0.f), beta({3}, 0.f), mu({3}, 0.f), var({3}, 1.f);
  beta.data()[0] = 0.5f;
  beta.data()[1] = -1.f;
  beta.data()[2] = 2.f;
  auto y = batchnorm2d(x, gamma, beta, mu, var, 1e-5f, true);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 16; ++i)
        CHECK(y.data()[(b * 3 + c) * 16 + i] == doctest::Approx(beta.data()[c]));
}

TEST_CASE("batchnorm output statistics are (0,1) per channel") {
  // the [DERIVED] example: random 4x3x2x2 input, direct mean/var computation
  Rng rng(7);
  Tensor<float> x = randn<float>(rng, {4, 3, 2, 2}, 2.0);
  Tensor<float> gamma({3}, 1.f), beta({3}, 0.f), mu({3}, 0.f), var({3}, 1.f);
  auto y = batchnorm2d(x, gamma, beta, mu, var, 1e-6f, true);
  int64_t N = 4 * 2 * 2;
  for (int64_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < 4; ++i) m += y.data()[(b * 3 + c) * 4 + i];
    m /= double(N);
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < 4; ++i) {
        double d = y.data()[(b * 3 + c) * 4 + i] - m;
        v += d * d;
      }
    v /= double(N);
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }
}

TEST_CASE("batchnorm degenerate variance error") {
  Tensor<float> x({1, 3, 1, 1}, 1.f);
  Tensor<float> gamma({3}, 1.f), beta({3}, 0.f), mu({3}, 0.f), var({3}, 1.f);
  CHECK_THROWS_AS(batchnorm2d(x, gamma, beta, mu, var, 1e-5f, true), ValueError);
  // running stats are fine for a single 1x1 sample
  CHECK_NOTHROW(batchnorm2d(x, gamma, beta, mu, var, 1e-5f, false));
}

TEST_CASE("batchnorm never touches stored stats at test time") {
  Rng rng(11);
  Tensor<float> x = randn<float>(rng, {2, 3, 4, 4});
  Tensor<float> gamma({3}, 1.f), beta({3}, 0.f), mu({3}, 0.25f), var({3}, 2.f);
  auto mu0 = mu.vec();
  auto var0 = var.vec();
  (void)batchnorm2d(x, gamma, beta, mu, var, 1e-5f, false, StatsWrite::None);
  CHECK(mu.vec() == mu0);
  CHECK(var.vec() == var0);
  // batch-stat mode without a write also leaves them alone
  (void)batchnorm2d(x, gamma, beta, mu, var, 1e-5f, true, StatsWrite::None);
  CHECK(mu.vec() == mu0);
  CHECK(var.vec() == var0);
  // estimation overwrites
  (void)batchnorm2d(x, gamma, beta, mu, var, 1e-5f, true, StatsWrite::Overwrite);
  CHECK(mu.vec() != mu0);
}

TEST_CASE("gradcheck: batchnorm both statistics modes and granularities") {
  Rng rng(13);
  for (int samplewise = 0; samplewise <= 1; ++samplewise) {
    for (int batch_stats = 0; batch_stats <= 1; ++batch_stats) {
      int64_t B = 3, C = 2, H = 3, W = 3;
      auto x = randn<double>(rng, {B, C, H, W});
      Tensor<double> gamma = samplewise ? Tensor<double>({B, C}) : Tensor<double>({C});
      Tensor<double> beta = samplewise ? Tensor<double>({B, C}) : Tensor<double>({C});
      for (int64_t i = 0; i < gamma.numel(); ++i) {
        gamma.data()[i] = 1.0 + 0.2 * rng.normal();
        beta.data()[i] = 0.1 * rng.normal();
      }
      Tensor<double> mu({C}, 0.1), var({C}, 1.3);
      x.set_requires_grad(true);
      gamma.set_requires_grad(true);
      beta.set_requires_grad(true);
      auto fn = [&] {
        auto y = batchnorm2d(x, gamma, beta, mu, var, 1e-5, batch_stats == 1);
        return sum(mul(y, y));
      };
      auto r = gradcheck::check(fn, {&x, &gamma, &beta});
      CHECK_MESSAGE(r.ok, "samplewise=" << samplewise << " batch_stats=" << batch_stats << ": " << r.detail);
    }
  }
}

TEST_CASE("build_model determinism and shape contract") {
  auto a = build_model<float>("convnet-bn-small", 10, 0);
  auto b = build_model<float>("convnet-bn-small", 10, 0);
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(std::memcmp(pa[i]->data(), pb[i]->data(), size_t(pa[i]->numel()) * 4) == 0);

  Tensor<float> x({3, 1, 28, 28}, 0.5f);
  auto logits = a.forward(x, {false, StatsWrite::None});
  CHECK(logits.shape() == std::vector<int64_t>{3, 10});

  auto r = build_model<float>("resnet-8-bn", 10, 1);
  auto lr = r.forward(x, {false, StatsWrite::None});
  CHECK(lr.shape() == std::vector<int64_t>{3, 10});

  CHECK_THROWS_WITH_AS(build_model<float>("vgg", 10, 0),
                       doctest::Contains("convnet-bn-small"), ValueError);
}

TEST_CASE("untrained model predicts at chance level on balanced data") {
  auto model = build_model<float>("convnet-bn-small", 8, 3);
  Dataset d = synth_shapes(1000, 8, 99);
  NoTapeScope<float> guard;
  int64_t hits = 0;
  for (int64_t s = 0; s < d.size(); s += 250) {
    Dataset b = d.slice(s, 250);
    auto pred = argmax_rows(model.forward(b.images, {false, StatsWrite::None}));
    for (size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == b.labels[i]) ++hits;
  }
  double acc = 100.0 * double(hits) / double(d.size());
  CHECK(acc > 12.5 - 5.0);
  CHECK(acc < 12.5 + 5.0);
}

// ---------------------------------------------------------------------------
// Gaussian smoothing
// ---------------------------------------------------------------------------

TEST_CASE("smoothing with sigma=0 returns the input bitwise") {
  Rng rng(17);
  Tensor<float> x = randn<float>(rng, {2, 1, 6, 6});
  SmoothingParams<float> p;
  p.init(0.f);
  auto y = gaussian_smooth(x, p);
  CHECK(std::memcmp(x.data(), y.data(), size_t(x.numel()) * 4) == 0);
}

TEST_CASE("smoothing preserves constants (kernel normalization)") {
  Tensor<float> x({1, 1, 8, 8}, 0.37f);
  SmoothingParams<float> p;
  p.init(1.2f);
  auto y = gaussian_smooth(x, p);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(0.37f).epsilon(1e-5));
}

TEST_CASE("smoothed impulse matches the brute-force Gaussian convolution") {
  // independent oracle: direct 2-d convolution with the normalized kernel
  double sigma = 1.0;
  int64_t n = 9;
  Tensor<float> x({1, 1, n, n}, 0.f);
  x.data()[(n / 2) * n + n / 2] = 1.f;
  SmoothingParams<float> p;
  p.init(float(sigma));
  auto y = gaussian_smooth(x, p);

  int64_t r = int64_t(std::ceil(3 * sigma));
  std::vector<double> k(size_t(2 * r + 1));
  double ks = 0;
  for (int64_t i = -r; i <= r; ++i) {
    k[size_t(i + r)] = std::exp(-double(i * i) / (2 * sigma * sigma));
    ks += k[size_t(i + r)];
  }
  for (auto& v : k) v /= ks;
  for (int64_t yy = 0; yy < n; ++yy)
    for (int64_t xx = 0; xx < n; ++xx) {
      double expect = 0;
      // separable kernel applied as a full 2-d brute-force sum
      for (int64_t dy = -r; dy <= r; ++dy)
        for (int64_t dx = -r; dx <= r; ++dx) {
          int64_t sy = yy + dy, sx = xx + dx;
          if (sy < 0 || sy >= n || sx < 0 || sx >= n) continue;
          if (sy == n / 2 && sx == n / 2) expect += k[size_t(-dy + r)] * k[size_t(-dx + r)];
        }
      CHECK(y.data()[yy * n + xx] == doctest::Approx(float(expect)).epsilon(1e-4));
    }
}

TEST_CASE("gaussian kernel rows sum to 1 across the sigma range") {
  // smoothing a constant image stays constant for any sigma in [0, 5]
  for (double sigma : {0.0, 0.3, 0.7, 1.0, 2.0, 3.5, 5.0}) {
    Tensor<float> x({1, 1, 16, 16}, 1.f);
    SmoothingParams<float> p;
    p.init(float(sigma));
    auto y = gaussian_smooth(x, p);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i] - 1.f) < 1e-6f);
  }
}

TEST_CASE("smoothing radius is capped") {
  SmoothingParams<float> p;
  p.init(10.f);
  CHECK(p.radius() == 7);
}

TEST_CASE("gradcheck: smoothing width gradient") {
  Rng rng(23);
  auto x = randn<double>(rng, {2, 1, 7, 7});
  SmoothingParams<double> p;
  p.init(0.8);
  x.set_requires_grad(true);
  auto fn = [&] {
    auto y = gaussian_smooth(x, p);
    return sum(mul(y, y));
  };
  auto r = gradcheck::check(fn, {&x, &p.raw}, 1e-5, 1e-3);
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("per-sample sigma smooths each sample with its own width") {
  Rng rng(29);
  Tensor<float> x = randn<float>(rng, {2, 1, 9, 9});
  SmoothingParams<float> shared;
  shared.init(1.5f);
  SmoothingParams<float> per;
  per.per_sample = true;
  per.init(1.5f, 2);
  // drive sample 0 to sigma 0
  per.raw.data()[0] = SmoothingParams<float>::raw_of_sigma(0.f);
  auto y = gaussian_smooth(x, per);
  auto y_shared = gaussian_smooth(x, shared);
  // sample 0 is untouched, sample 1 matches the shared-width result
  for (int64_t i = 0; i < 81; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
  for (int64_t i = 81; i < 162; ++i) CHECK(y.data()[i] == doctest::Approx(y_shared.data()[i]).epsilon(1e-5));
}

TEST_CASE("negative sigma is rejected") {
  SmoothingParams<float> p;
  CHECK_THROWS_AS(p.init(-0.5f), ValueError);
}

TEST_CASE("checkpoint round-trip preserves the forward function") {
  auto m = build_model<float>("convnet-bn-small", 8, 42);
  // make stats non-trivial
  for (auto* bn : m.bn_layers()) {
    bn->mu.data()[0] = 0.3f;
    bn->var.data()[0] = 1.7f;
  }
  std::string path = "/tmp/dentlab_test_ckpt.bin";
  save_checkpoint(m, path);
  auto loaded = load_checkpoint(path);
  Rng rng(1);
  Tensor<float> x = randn<float>(rng, {2, 1, 28, 28});
  auto a = m.forward(x, {false, StatsWrite::None});
  auto b = loaded.forward(x, {false, StatsWrite::None});
  CHECK(std::memcmp(a.data(), b.data(), size_t(a.numel()) * 4) == 0);
}

TEST_CASE("checkpoint rejects newer format versions") {
  auto m = build_model<float>("convnet-bn-small", 8, 42);
  std::string path = "/tmp/dentlab_test_ckpt2.bin";
  save_checkpoint(m, path);
  // bump the version field (bytes 4..7)
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    uint32_t v = 99;
    f.seekp(4);
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("newer"), IoError);
}
