#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "stnreid/nnops.hpp"
#include "stnreid/rng.hpp"

using namespace stnreid;

namespace {

Tensor rand_tensor(std::vector<int> dims, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(dims));
  for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 gives the window sum") {
  Tensor x({1, 1, 3, 3}, 1.0f);
  Tensor w({1, 1, 3, 3}, 1.0f);
  Tensor b({1}, 0.0f);
  Tensor y = conv2d(x, w, b, 1, 0);
  REQUIRE(y.dims() == std::vector<int>{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(9.0f));
}

TEST_CASE("conv2d reproduces the canonical first-layer output size") {
  // 7x7 stride-2 kernel with padding 3 on a 256x128 6-channel pair
  Rng rng(1);
  Tensor x = rand_tensor({1, 6, 256, 128}, rng, 0.0f, 1.0f);
  Tensor w = rand_tensor({16, 6, 7, 7}, rng, -0.1f, 0.1f);
  Tensor b({16}, 0.0f);
  Tensor y = conv2d(x, w, b, 2, 3);
  CHECK(y.dims() == std::vector<int>{1, 16, 128, 64});
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(2);
  Tensor x = rand_tensor({2, 3, 8, 8}, rng);
  Tensor w = rand_tensor({4, 3, 3, 3}, rng);
  Tensor b = rand_tensor({4}, rng);
  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
    Tensor got = conv2d(x, w, b, stride, pad);
    Tensor want = oracle::conv2d(x, w, b, stride, pad);
    REQUIRE(got.dims() == want.dims());
    for (long long i = 0; i < got.numel(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-5f);
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor x({1, 3, 8, 8}, 0.0f);
  Tensor w({4, 2, 3, 3}, 0.0f);
  Tensor b({4}, 0.0f);
  CHECK_THROWS_AS(conv2d(x, w, b, 1, 0), Error);
}

TEST_CASE("conv2d is linear in its input with zero bias") {
  Rng rng(3);
  Tensor x = rand_tensor({1, 2, 6, 6}, rng);
  Tensor w = rand_tensor({3, 2, 3, 3}, rng);
  Tensor b({3}, 0.0f);
  Tensor xs(x.dims());
  for (long long i = 0; i < x.numel(); ++i) xs[i] = 2.5f * x[i];
  Tensor y1 = conv2d(x, w, b, 1, 1);
  Tensor y2 = conv2d(xs, w, b, 1, 1);
  for (long long i = 0; i < y1.numel(); ++i)
    CHECK(y2[i] == doctest::Approx(2.5f * y1[i]).epsilon(1e-5));
}

TEST_CASE("maxpool2x2 forward and tie routing") {
  Tensor x({1, 1, 2, 2});
  x.at(0, 0, 0, 0) = 1;
  x.at(0, 0, 0, 1) = 2;
  x.at(0, 0, 1, 0) = 3;
  x.at(0, 0, 1, 1) = 4;
  TensorT<int> idx;
  Tensor y = maxpool2x2(x, idx);
  CHECK(y[0] == doctest::Approx(4.0f));
  CHECK(idx[0] == 3);
  Tensor gy({1, 1, 1, 1}, 1.0f);
  Tensor gx = maxpool2x2_backward(gy, idx, x.dims());
  CHECK(gx.at(0, 0, 1, 1) == doctest::Approx(1.0f));
  CHECK(gx.at(0, 0, 0, 0) == doctest::Approx(0.0f));

  // constant input routes to the first window element
  Tensor c({1, 1, 2, 2}, 7.0f);
  Tensor yc = maxpool2x2(c, idx);
  CHECK(yc[0] == doctest::Approx(7.0f));
  CHECK(idx[0] == 0);
}

TEST_CASE("maxpool2x2 matches the oracle and checks parity") {
  Rng rng(4);
  Tensor x = rand_tensor({2, 16, 128, 64}, rng);
  TensorT<int> idx;
  Tensor y = maxpool2x2(x, idx);
  CHECK(y.dims() == std::vector<int>{2, 16, 64, 32});
  Tensor want = oracle::maxpool2x2(x);
  for (long long i = 0; i < y.numel(); ++i) CHECK(y[i] == want[i]);

  Tensor odd({1, 1, 3, 4}, 0.0f);
  CHECK_THROWS_AS(maxpool2x2(odd, idx), Error);
}

TEST_CASE("linear identity and bias broadcast") {
  Tensor x({2, 6});
  Rng rng(5);
  for (long long i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform(-1, 1));
  Tensor w({6, 6}, 0.0f);
  for (int i = 0; i < 6; ++i) w.at(i, i) = 1.0f;
  Tensor b({6}, 0.0f);
  Tensor y = linear(x, w, b);
  for (long long i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]));

  // zero weights, identity-theta bias: every row equals the bias
  Tensor w0({6, 6}, 0.0f);
  Tensor theta_bias({6}, 0.0f);
  theta_bias[0] = 1.0f;
  theta_bias[4] = 1.0f;
  Tensor y2 = linear(x, w0, theta_bias);
  for (int i = 0; i < 2; ++i) {
    CHECK(y2.at(i, 0) == doctest::Approx(1.0f));
    CHECK(y2.at(i, 1) == doctest::Approx(0.0f));
    CHECK(y2.at(i, 4) == doctest::Approx(1.0f));
    CHECK(y2.at(i, 5) == doctest::Approx(0.0f));
  }
}

TEST_CASE("linear matches the matmul oracle") {
  Rng rng(6);
  Tensor x = rand_tensor({3, 5}, rng);
  Tensor w = rand_tensor({5, 2}, rng);
  Tensor b({2}, 0.0f);
  Tensor got = linear(x, w, b);
  Tensor want = oracle::matmul(x, w);
  for (long long i = 0; i < got.numel(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-5));

  Tensor bad({3, 4}, 0.0f);
  CHECK_THROWS_AS(linear(bad, w, b), Error);
}

TEST_CASE("linear is homogeneous in its input with zero bias") {
  Rng rng(55);
  Tensor x = rand_tensor({3, 4}, rng);
  Tensor w = rand_tensor({4, 5}, rng);
  Tensor b({5}, 0.0f);
  Tensor xs(x.dims());
  for (long long i = 0; i < x.numel(); ++i) xs[i] = -1.5f * x[i];
  Tensor y1 = linear(x, w, b);
  Tensor y2 = linear(xs, w, b);
  for (long long i = 0; i < y1.numel(); ++i)
    CHECK(std::abs(y2[i] + 1.5f * y1[i]) < 1e-5f);
}

TEST_CASE("batchnorm2d normalizes per channel in train mode") {
  Rng rng(7);
  Tensor x = rand_tensor({4, 3, 5, 5}, rng, -2.0f, 3.0f);
  BatchNorm2d<float> bn(3);
  BatchNorm2d<float>::Acts acts;
  Tensor y = bn.forward(x, true, acts);
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    long long m = 0;
    for (int n = 0; n < 4; ++n)
      for (int r = 0; r < 5; ++r)
        for (int q = 0; q < 5; ++q) {
          sum += y.at(n, c, r, q);
          sq += static_cast<double>(y.at(n, c, r, q)) * y.at(n, c, r, q);
          ++m;
        }
    const double mean = sum / m;
    const double var = sq / m - mean * mean;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("batchnorm2d affine parameters shift and scale") {
  Rng rng(8);
  Tensor x = rand_tensor({4, 2, 4, 4}, rng);
  BatchNorm2d<float> bn(2);
  bn.gamma.value.fill(2.0f);
  bn.beta.value.fill(3.0f);
  BatchNorm2d<float>::Acts acts;
  Tensor y = bn.forward(x, true, acts);
  for (int c = 0; c < 2; ++c) {
    double sum = 0, sq = 0;
    long long m = 0;
    for (int n = 0; n < 4; ++n)
      for (int r = 0; r < 4; ++r)
        for (int q = 0; q < 4; ++q) {
          sum += y.at(n, c, r, q);
          sq += static_cast<double>(y.at(n, c, r, q)) * y.at(n, c, r, q);
          ++m;
        }
    const double mean = sum / m;
    const double stddev = std::sqrt(sq / m - mean * mean);
    CHECK(mean == doctest::Approx(3.0).epsilon(1e-3));
    CHECK(stddev == doctest::Approx(2.0).epsilon(1e-2));
  }
}

TEST_CASE("batchnorm2d eval mode uses running stats") {
  Rng rng(9);
  BatchNorm2d<float> bn(2);
  BatchNorm2d<float>::Acts acts;
  for (int i = 0; i < 60; ++i) {
    Tensor x = rand_tensor({8, 2, 4, 4}, rng, 1.0f, 3.0f);
    bn.forward(x, true, acts);
  }
  // running mean should approach the data mean of 2
  CHECK(bn.running_mean[0] == doctest::Approx(2.0).epsilon(0.1));
  Tensor probe({1, 2, 2, 2}, 2.0f);
  Tensor y = bn.forward(probe, false, acts);
  CHECK(std::abs(y[0]) < 0.2f);
}

TEST_CASE("relu values and gate") {
  Tensor x({3});
  x[0] = -1;
  x[1] = 0;
  x[2] = 2;
  Tensor y = relu(x);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == 2.0f);
  Tensor gy({3}, 1.0f);
  Tensor gx = relu_backward(gy, x);
  CHECK(gx[0] == 0.0f);
  CHECK(gx[1] == 0.0f);  // subgradient at exactly zero is zero
  CHECK(gx[2] == 1.0f);
}

TEST_CASE("adam first step moves by about lr") {
  ParameterT<float> p({1});
  p.value[0] = 1.0f;
  p.grad[0] = 1.0f;
  std::vector<ParamRef<float>> refs{{"p", &p}};
  adam_step(refs, 2e-4, 0.9, 0.999, 1e-8, 0.0, 1);
  CHECK(1.0f - p.value[0] == doctest::Approx(2e-4).epsilon(1e-3));
  CHECK(p.grad[0] == 0.0f);  // gradients zeroed afterward
}

TEST_CASE("adam zero gradient zero decay is a no-op") {
  ParameterT<float> p({3});
  p.value.fill(0.5f);
  std::vector<ParamRef<float>> refs{{"p", &p}};
  adam_step(refs, 1e-2, 0.9, 0.999, 1e-8, 0.0, 1);
  for (int i = 0; i < 3; ++i) CHECK(p.value[i] == 0.5f);
}

TEST_CASE("adam minimizes x^2 from x=1") {
  ParameterT<float> p({1});
  p.value[0] = 1.0f;
  std::vector<ParamRef<float>> refs{{"x", &p}};
  for (int t = 1; t <= 100; ++t) {
    p.grad[0] = 2.0f * p.value[0];
    adam_step(refs, 0.1, 0.9, 0.999, 1e-8, 0.0, t);
  }
  CHECK(std::abs(p.value[0]) < 0.1f);
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ParameterT<float> p({1});
  p.grad[0] = std::numeric_limits<float>::quiet_NaN();
  std::vector<ParamRef<float>> refs{{"stn.conv1.w", &p}};
  try {
    adam_step(refs, 1e-3, 0.9, 0.999, 1e-8, 0.0, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stn.conv1.w") != std::string::npos);
  }
}

TEST_CASE("frozen parameters are untouched by accumulate and adam") {
  ParameterT<float> p({2});
  p.value.fill(1.0f);
  p.frozen = true;
  Tensor g({2}, 5.0f);
  p.accumulate(g);
  CHECK(p.grad[0] == 0.0f);
  std::vector<ParamRef<float>> refs{{"p", &p}};
  adam_step(refs, 1e-2, 0.9, 0.999, 1e-8, 1e-2, 3);
  CHECK(p.value[0] == 1.0f);
  CHECK(p.adam_m[0] == 0.0f);
  CHECK(p.adam_v[0] == 0.0f);
}

TEST_CASE("forward passes keep finite inputs finite") {
  Rng rng(10);
  Tensor x = rand_tensor({2, 3, 8, 8}, rng, -10.0f, 10.0f);
  Tensor w = rand_tensor({4, 3, 3, 3}, rng, -5.0f, 5.0f);
  Tensor b = rand_tensor({4}, rng, -5.0f, 5.0f);
  CHECK(conv2d(x, w, b, 1, 1).all_finite());
  TensorT<int> idx;
  CHECK(maxpool2x2(x, idx).all_finite());
  CHECK(relu(x).all_finite());
  BatchNorm2d<float> bn(3);
  BatchNorm2d<float>::Acts acts;
  CHECK(bn.forward(x, true, acts).all_finite());
}
