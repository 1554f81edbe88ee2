#include <cstring>

#include "dentlab/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace dentlab;

namespace {

Tensor<double> randu(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("relu forward matches definition") {
  Tensor<float> x({3}, {-1.f, 0.f, 2.f});
  auto y = relu(x);
  CHECK(y.data()[0] == 0.f);
  CHECK(y.data()[1] == 0.f);
  CHECK(y.data()[2] == 2.f);
}

TEST_CASE("conv2d of ones sums the window") {
  Tensor<float> x({1, 1, 3, 3}, 1.f);
  Tensor<float> w({1, 1, 3, 3}, 1.f);
  auto y = conv2d(x, w, 1, 0);
  CHECK(y.shape() == std::vector<int64_t>{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.f));
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor<float> z({1, 3}, 0.f);
  auto p = softmax_rows(z);
  for (int i = 0; i < 3; ++i) CHECK(p.data()[i] == doctest::Approx(1.f / 3.f));
}

TEST_CASE("backward of sum(x*x) is 2x") {
  Tensor<float> x = Tensor<float>::param({2});
  x.data()[0] = 1.f;
  x.data()[1] = 2.f;
  Tape<float> tape;
  TapeScope<float> scope(tape);
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.f));
  CHECK(x.grad()[1] == doctest::Approx(4.f));
}

TEST_CASE("backward of mean spreads 1/n") {
  Tensor<float> x = Tensor<float>::param({4}, 3.f);
  Tape<float> tape;
  TapeScope<float> scope(tape);
  auto loss = mean(x);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(0.25f));
}

TEST_CASE("backward twice without zeroing doubles every grad") {
  Tensor<float> x = Tensor<float>::param({3});
  for (int i = 0; i < 3; ++i) x.data()[i] = float(i + 1);
  Tape<float> tape;
  TapeScope<float> scope(tape);
  auto y = mul(x, x);
  auto loss = sum(y);
  tape.backward(loss);
  std::vector<float> g1(x.grad(), x.grad() + 3);
  std::vector<float> gy1(y.grad(), y.grad() + 3);  // intermediates accumulate too
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) {
    CHECK(x.grad()[i] == doctest::Approx(2.f * g1[i]));
    CHECK(y.grad()[i] == doctest::Approx(2.f * gy1[i]));
  }
}

TEST_CASE("requires_grad=false never accumulates gradient") {
  Tensor<float> x = Tensor<float>::param({3}, 2.f);
  Tensor<float> c({3}, 5.f);  // untracked
  Tape<float> tape;
  TapeScope<float> scope(tape);
  auto loss = sum(mul(x, c));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(5.f));
  CHECK_FALSE(c.has_grad());
}

TEST_CASE("backward errors: non-scalar root and empty tape") {
  Tape<float> tape;
  Tensor<float> x = Tensor<float>::param({2}, 1.f);
  CHECK_THROWS_AS(tape.backward(x), ValueError);  // empty tape
  TapeScope<float> scope(tape);
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ValueError);  // non-scalar root
}

TEST_CASE("shape mismatch errors name the op and shapes") {
  Tensor<float> a({2, 3}, 1.f);
  Tensor<float> b({4, 2}, 1.f);
  try {
    auto c = matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(Tensor<float>({1, 2, 4, 4}, 1.f), Tensor<float>({1, 3, 3, 3}, 1.f)), ShapeError);
}

TEST_CASE("entropy analytic values") {
  SUBCASE("one-hot row has zero entropy") {
    Tensor<float> p({1, 5}, 0.f);
    p.data()[2] = 1.f;
    auto h = entropy_rows(p);
    CHECK(std::abs(h.item()) < 1e-9f);
  }
  SUBCASE("uniform over 10 classes") {
    Tensor<float> p({1, 10}, 0.1f);
    auto h = entropy_rows(p);
    CHECK(h.item() == doctest::Approx(std::log(10.f)).epsilon(1e-5));
  }
  SUBCASE("two balanced classes") {
    Tensor<float> p({1, 2}, 0.5f);
    auto h = entropy_rows(p);
    CHECK(h.item() == doctest::Approx(std::log(2.f)).epsilon(1e-5));
  }
}

TEST_CASE("entropy validates row sums and identifies the row") {
  Tensor<float> p({2, 3}, 0.f);
  p.data()[0] = 1.f;              // row 0 fine
  p.data()[3] = 0.7f;             // row 1 sums to 0.7
  try {
    auto h = entropy_rows(p);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("entropy bounds: 0 <= H <= ln C on random rows") {
  Rng rng(7);
  for (int it = 0; it < 50; ++it) {
    int64_t C = 2 + rng.randint(9);
    Tensor<float> p({1, C});
    float s = 0;
    for (int64_t c = 0; c < C; ++c) {
      p.data()[c] = float(rng.uniform(0.0, 1.0)) + 1e-6f;
      s += p.data()[c];
    }
    for (int64_t c = 0; c < C; ++c) p.data()[c] /= s;
    auto h = entropy_rows(p);
    CHECK(h.item() >= -1e-6f);
    CHECK(h.item() <= std::log(float(C)) + 1e-5f);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs and grads") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor<float> x = Tensor<float>::param({4, 3, 6, 6});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.uniform(-1, 1));
    Tensor<float> w = Tensor<float>::param({5, 3, 3, 3});
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = float(rng.uniform(-1, 1));
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto y = conv2d(x, w, 1, 1);
    auto loss = mean(mul(y, y));
    tape.backward(loss);
    std::vector<float> out(y.data(), y.data() + y.numel());
    out.insert(out.end(), x.grad(), x.grad() + x.numel());
    out.insert(out.end(), w.grad(), w.grad() + w.numel());
    return out;
  };
  auto a = run(11), b = run(11);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle over every differentiable op (fp64, h=1e-5).
// ---------------------------------------------------------------------------

TEST_CASE("gradcheck: elementwise and reduction ops") {
  Rng rng(3);
  for (int it = 0; it < 8; ++it) {
    auto a = randu(rng, {2, 5});
    auto b = randu(rng, {2, 5}, 0.5, 1.5);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto r = gradcheck::check([&] { return sum(mul(add(a, b), sub(a, b))); }, {&a, &b});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return mean(div(a, b)); }, {&a, &b});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(mul(exp(mul_scalar(a, 0.3)), log(b))); }, {&a, &b});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(softplus(mul_scalar(a, 2.0))); }, {&a});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(relu(add_scalar(a, 0.1))); }, {&a});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(clamp(a, -0.5, 0.5)); }, {&a});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(mul(mean_axis0(a), mean_axis0(b))); }, {&a, &b});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(mul(sum_rows_keepdim(a), sum_rows_keepdim(b))); }, {&a, &b});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("gradcheck: broadcast binary ops") {
  Rng rng(5);
  auto a = randu(rng, {2, 3, 4, 4});
  auto g = randu(rng, {1, 3, 1, 1}, 0.5, 1.5);
  a.set_requires_grad(true);
  g.set_requires_grad(true);
  auto r = gradcheck::check([&] { return sum(mul(a, g)); }, {&a, &g});
  CHECK_MESSAGE(r.ok, r.detail);
  r = gradcheck::check([&] { return sum(div(a, g)); }, {&a, &g});
  CHECK_MESSAGE(r.ok, r.detail);
  auto row = randu(rng, {1, 4});
  auto col = randu(rng, {3, 1}, 0.5, 1.5);
  row.set_requires_grad(true);
  col.set_requires_grad(true);
  r = gradcheck::check([&] { return sum(div(row, col)); }, {&row, &col});
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("gradcheck: matmul, conv2d, pooling, pad, reshape") {
  Rng rng(9);
  for (int it = 0; it < 5; ++it) {
    auto a = randu(rng, {3, 4});
    auto b = randu(rng, {4, 2});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto r = gradcheck::check([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {&a, &b});
    CHECK_MESSAGE(r.ok, r.detail);

    auto x = randu(rng, {2, 2, 5, 5});
    auto w = randu(rng, {3, 2, 3, 3});
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    int64_t stride = 1 + rng.randint(2);
    r = gradcheck::check([&] { return sum(mul(conv2d(x, w, stride, 1), conv2d(x, w, stride, 1))); }, {&x, &w});
    CHECK_MESSAGE(r.ok, r.detail);

    r = gradcheck::check([&] { return sum(mul(avgpool2d(x, 2), avgpool2d(x, 2))); }, {&x});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(mul(pad2d(x, 2), pad2d(x, 2))); }, {&x});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return sum(mul(reshape(x, {2, 50}), reshape(x, {2, 50}))); }, {&x});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("gradcheck: softmax, entropy, losses, sepconv") {
  Rng rng(13);
  for (int it = 0; it < 5; ++it) {
    auto z = randu(rng, {3, 6}, -2.0, 2.0);
    z.set_requires_grad(true);
    std::vector<int> y{1, 4, 0};
    auto r = gradcheck::check([&] { return mean(entropy_rows(softmax_rows(z))); }, {&z});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return mean(cross_entropy_rows(z, y)); }, {&z});
    CHECK_MESSAGE(r.ok, r.detail);
    r = gradcheck::check([&] { return mean(dlr_rows(z, y)); }, {&z});
    CHECK_MESSAGE(r.ok, r.detail);

    auto x = randu(rng, {2, 2, 6, 5});
    auto k = randu(rng, {2, 5}, 0.1, 1.0);
    x.set_requires_grad(true);
    k.set_requires_grad(true);
    r = gradcheck::check([&] { return sum(mul(sepconv1d(x, k, 2), sepconv1d(x, k, 3))); }, {&x, &k});
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("gradcheck: randomized composite graphs") {
  Rng rng(21);
  int cases = 0;
  for (int it = 0; it < 12; ++it) {
    auto x = randu(rng, {2, 1 + rng.randint(3), 4, 4});
    auto w = randu(rng, {2 + rng.randint(3), x.dim(1), 3, 3});
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    auto fn = [&] {
      auto h = relu(conv2d(x, w, 1, 1));
      auto pooled = avgpool2d(h, 2);
      auto flat = reshape(pooled, {pooled.dim(0), pooled.numel() / pooled.dim(0)});
      return mean(mul(flat, flat));
    };
    auto r = gradcheck::check(fn, {&x, &w});
    CHECK_MESSAGE(r.ok, r.detail);
    ++cases;
  }
  CHECK(cases == 12);
}
