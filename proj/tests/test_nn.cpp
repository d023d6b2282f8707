#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "echocss/nn/layers.hpp"

using namespace echocss;
using nn::Tensor;

namespace {

Tensor random_tensor(Rng& rng, int n, int c, int h, int w) {
  Tensor t(n, c, h, w);
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

struct FdResult {
  double input = 0.0;
  double params = 0.0;
};

// Projects the output on a random direction and compares backward() with
// central differences of that scalar, in float with a 1e-2 absolute floor.
FdResult finite_difference(Tensor x, const std::function<Tensor(const Tensor&)>& fwd,
                           const std::function<Tensor(const Tensor&)>& bwd, const nn::ParamList& ps,
                           std::uint64_t seed = 7) {
  Rng rng(seed);
  const Tensor y = fwd(x);
  const Tensor dir = random_tensor(rng, y.n(), y.c(), y.h(), y.w());
  auto objective = [&] {
    const Tensor out = fwd(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += static_cast<double>(out[i]) * dir[i];
    return acc;
  };
  nn::zero_grad(ps);
  fwd(x);
  const Tensor dx = bwd(dir);
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-2}); };
  FdResult r;
  const double eps = 1e-3;
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = rng.index(x.size());
    const float orig = x[i];
    x[i] = orig + static_cast<float>(eps);
    const double up = objective();
    x[i] = orig - static_cast<float>(eps);
    const double down = objective();
    x[i] = orig;
    r.input = std::max(r.input, rel((up - down) / (2 * eps), dx[i]));
  }
  for (auto* p : ps)
    for (int k = 0; k < 10; ++k) {
      const std::size_t i = rng.index(p->value.size());
      const float orig = p->value[i];
      p->value[i] = orig + static_cast<float>(eps);
      const double up = objective();
      p->value[i] = orig - static_cast<float>(eps);
      const double down = objective();
      p->value[i] = orig;
      r.params = std::max(r.params, rel((up - down) / (2 * eps), p->grad[i]));
    }
  return r;
}

constexpr double kTol = 3e-2;

}  // namespace

TEST(Layers, Conv2dGradients) {
  Rng rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}}) {
    nn::Conv2d conv(3, 4, k, stride, pad, rng, "conv");
    nn::ParamList ps;
    conv.collect(ps);
    const auto r = finite_difference(random_tensor(rng, 2, 3, 8, 8), [&](const Tensor& x) { return conv.forward(x); },
                                     [&](const Tensor& g) { return conv.backward(g); }, ps);
    EXPECT_LT(r.input, kTol) << "k=" << k << " stride=" << stride;
    EXPECT_LT(r.params, kTol);
  }
}

TEST(Layers, Conv2dOutputSize) {
  Rng rng(1);
  nn::Conv2d conv(1, 1, 3, 2, 1, rng, "c");
  EXPECT_EQ(conv.out_h(64), 32);
  EXPECT_EQ(conv.forward(Tensor(1, 1, 9, 9)).h(), 5);
  EXPECT_THROW(conv.forward(Tensor(1, 2, 8, 8)), ContractError);
}

TEST(Layers, TemporalConvGradients) {
  Rng rng(2);
  nn::TemporalConv tc(3, 4, 3, rng, "t");
  nn::ParamList ps;
  tc.collect(ps);
  const auto r = finite_difference(random_tensor(rng, 5, 3, 4, 4), [&](const Tensor& x) { return tc.forward(x); },
                                   [&](const Tensor& g) { return tc.backward(g); }, ps);
  EXPECT_LT(r.input, kTol);
  EXPECT_LT(r.params, kTol);
}

TEST(Layers, TemporalConvIsLocal) {
  Rng rng(2);
  nn::TemporalConv tc(1, 1, 3, rng, "t");
  Tensor x(6, 1, 1, 1);
  x(0, 0, 0, 0) = 1.0f;
  const Tensor y = tc.forward(x);
  // An impulse at t = 0 reaches only t = 0 and t = 1 with kernel 3.
  for (int t = 2; t < 6; ++t) EXPECT_FLOAT_EQ(y(t, 0, 0, 0), y(5, 0, 0, 0));
}

TEST(Layers, LinearGradients) {
  Rng rng(3);
  nn::Linear fc(12, 5, rng, "fc");
  nn::ParamList ps;
  fc.collect(ps);
  const auto r = finite_difference(random_tensor(rng, 3, 12, 1, 1), [&](const Tensor& x) { return fc.forward(x); },
                                   [&](const Tensor& g) { return fc.backward(g); }, ps);
  EXPECT_LT(r.input, kTol);
  EXPECT_LT(r.params, kTol);
}

TEST(Layers, ChannelNormGradientsAndStatistics) {
  Rng rng(4);
  nn::ChannelNorm norm(3, "n");
  nn::ParamList ps;
  norm.collect(ps);
  const Tensor x = random_tensor(rng, 4, 3, 4, 4);
  const Tensor y = norm.forward(x);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 16; ++i) m += y(n, c, i / 4, i % 4);
    m /= 64;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 16; ++i) v += std::pow(y(n, c, i / 4, i % 4) - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v / 64, 1.0, 1e-3);
  }
  const auto r = finite_difference(x, [&](const Tensor& t) { return norm.forward(t); },
                                   [&](const Tensor& g) { return norm.backward(g); }, ps);
  EXPECT_LT(r.input, kTol);
  EXPECT_LT(r.params, kTol);
}

TEST(Layers, ParameterFreeGradients) {
  Rng rng(5);
  nn::Relu relu;
  nn::TemporalStatsPool stats;
  EXPECT_LT(finite_difference(random_tensor(rng, 2, 3, 4, 4), [&](const Tensor& x) { return relu.forward(x); },
                              [&](const Tensor& g) { return relu.backward(g); }, {})
                .input,
            kTol);
  EXPECT_LT(finite_difference(random_tensor(rng, 6, 4, 1, 1), [&](const Tensor& x) { return stats.forward(x); },
                              [&](const Tensor& g) { return stats.backward(g); }, {})
                .input,
            kTol);
  EXPECT_LT(finite_difference(random_tensor(rng, 2, 3, 4, 4), [](const Tensor& x) { return nn::global_avg_pool(x); },
                              [](const Tensor& g) { return nn::global_avg_pool_backward(g, 4, 4); }, {})
                .input,
            kTol);
  EXPECT_LT(finite_difference(random_tensor(rng, 2, 3, 4, 4), [](const Tensor& x) { return nn::upsample2x(x); },
                              [](const Tensor& g) { return nn::upsample2x_backward(g); }, {})
                .input,
            kTol);
}

TEST(Layers, ResidualBlockGradients) {
  Rng rng(6);
  nn::ResidualBlock block(4, rng, "res");
  nn::ParamList ps;
  block.collect(ps);
  const auto r = finite_difference(random_tensor(rng, 2, 4, 6, 6), [&](const Tensor& x) { return block.forward(x); },
                                   [&](const Tensor& g) { return block.backward(g); }, ps);
  EXPECT_LT(r.input, kTol);
  EXPECT_LT(r.params, kTol);
}

TEST(Layers, StatsPoolValues) {
  Tensor x(3, 1, 1, 1);
  x[0] = 1.0f;
  x[1] = -2.0f;
  x[2] = 4.0f;
  nn::TemporalStatsPool pool;
  const Tensor y = pool.forward(x);
  EXPECT_FLOAT_EQ(y[0], 1.0f);
  EXPECT_FLOAT_EQ(y[1], 4.0f);
  EXPECT_FLOAT_EQ(y[2], -2.0f);
}

TEST(Optimizer, SgdMomentumAndClipping) {
  nn::Param p("w", 1, 1, 1, 2);
  p.value[0] = 1.0f;
  p.grad[0] = 3.0f;
  p.grad[1] = 4.0f;
  nn::ParamList ps{&p};
  EXPECT_DOUBLE_EQ(nn::clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(nn::grad_norm(ps), 1.0, 1e-6);
  const nn::Sgd opt{0.5, 0.9};
  opt.step(ps);
  EXPECT_NEAR(p.value[0], 1.0 - 0.5 * 0.6, 1e-6);
  opt.step(ps);  // v = 0.9 * 0.6 + 0.6
  EXPECT_NEAR(p.value[0], 0.7 - 0.5 * 1.14, 1e-6);
}

TEST(Tensor, ConcatAndSplitChannels) {
  Rng rng(9);
  const Tensor a = random_tensor(rng, 2, 3, 2, 2);
  const Tensor b = random_tensor(rng, 2, 1, 2, 2);
  const Tensor ab = nn::concat_channels(a, b);
  EXPECT_EQ(ab.c(), 4);
  const auto [a2, b2] = nn::split_channels(ab, 3);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), a2.values().begin()));
  EXPECT_TRUE(std::equal(b.values().begin(), b.values().end(), b2.values().begin()));
}
