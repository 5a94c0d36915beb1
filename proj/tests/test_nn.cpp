#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "tightbox/nn.hpp"

using namespace tightbox;
using namespace tightbox::nn;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& g) {
  Tensor t(n, c, h, w);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : t.data) v = u(g);
  return t;
}

// Loss = sum(y * r) in double.
double probe_loss(const Tensor& y, const std::vector<float>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y.data[i]) * r[i];
  return s;
}

// Central differences on the input and on every parameter, compared against
// the analytic backward pass.
void check_gradients(Layer& layer, const Tensor& x, double tol = 2e-2) {
  std::mt19937_64 g(11);
  Saved saved;
  const Tensor y = layer.forward(x, &saved);
  std::vector<float> r(y.size());
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : r) v = u(g);
  Tensor dy(y.n, y.c, y.h, y.w);
  dy.data.assign(r.begin(), r.end());

  std::vector<Param*> params;
  layer.parameters(params);
  zero_grad(params);
  const Tensor dx = layer.backward(dy, saved);
  ASSERT_TRUE(dx.same_shape(x));

  const float eps = 1e-2f;
  auto compare = [&](float& slot, double analytic, const char* what, std::size_t i) {
    const float keep = slot;
    slot = keep + eps;
    const double lp = probe_loss(layer.forward(x, nullptr), r);
    slot = keep - eps;
    const double lm = probe_loss(layer.forward(x, nullptr), r);
    slot = keep;
    const double numeric = (lp - lm) / (2.0 * eps);
    EXPECT_NEAR(analytic, numeric, tol * std::max(1.0, std::fabs(numeric))) << what << "[" << i << "]";
  };

  Tensor xp = x;
  const std::size_t stride_x = std::max<std::size_t>(1, x.size() / 40);
  for (std::size_t i = 0; i < x.size(); i += stride_x) {
    const float keep = xp.data[i];
    xp.data[i] = keep + eps;
    const double lp = probe_loss(layer.forward(xp, nullptr), r);
    xp.data[i] = keep - eps;
    const double lm = probe_loss(layer.forward(xp, nullptr), r);
    xp.data[i] = keep;
    const double numeric = (lp - lm) / (2.0 * eps);
    EXPECT_NEAR(dx.data[i], numeric, tol * std::max(1.0, std::fabs(numeric))) << "input[" << i << "]";
  }
  for (Param* p : params) {
    const std::size_t stride_p = std::max<std::size_t>(1, p->value.size() / 40);
    for (std::size_t i = 0; i < p->value.size(); i += stride_p) compare(p->value[i], p->grad[i], "param", i);
  }
}

}  // namespace

TEST(Conv2d, ForwardMatchesDirectLoops) {
  std::mt19937_64 g(1);
  Conv2d conv(4, 6, 3, 2, 1, 2);
  Rng rng = make_stream(2);
  conv.initialize(rng);
  for (auto& b : conv.bias.value) b = 0.25f;
  const Tensor x = random_tensor(2, 4, 9, 7, g);
  const Tensor y = conv.forward(x, nullptr);
  ASSERT_EQ(y.c, 6);
  ASSERT_EQ(y.h, 5);
  ASSERT_EQ(y.w, 4);
  const int cin_g = 2, cout_g = 3;
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 6; ++o)
      for (int oy = 0; oy < y.h; ++oy)
        for (int ox = 0; ox < y.w; ++ox) {
          double acc = conv.bias.value[o];
          const int grp = o / cout_g;
          for (int ci = 0; ci < cin_g; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 9 || ix < 0 || ix >= 7) continue;
                const int c = grp * cin_g + ci;
                acc += conv.weight.value[((o * cin_g + ci) * 3 + ky) * 3 + kx] *
                       x.data[((n * 4 + c) * 9 + iy) * 7 + ix];
              }
          EXPECT_NEAR(y.data[((n * 6 + o) * y.h + oy) * y.w + ox], acc, 1e-5);
        }
}

TEST(Conv2d, Gradients) {
  std::mt19937_64 g(3);
  Conv2d conv(3, 4, 3, 1, 1);
  Rng rng = make_stream(4);
  conv.initialize(rng);
  check_gradients(conv, random_tensor(2, 3, 6, 5, g));
}

TEST(Conv2d, StridedDepthwiseGradients) {
  std::mt19937_64 g(5);
  Conv2d conv(4, 4, 3, 2, 1, 4, false);
  Rng rng = make_stream(6);
  conv.initialize(rng);
  check_gradients(conv, random_tensor(2, 4, 7, 7, g));
}

TEST(Linear, Gradients) {
  std::mt19937_64 g(7);
  Linear lin(12, 5);
  Rng rng = make_stream(8);
  lin.initialize(rng);
  check_gradients(lin, random_tensor(3, 12, 1, 1, g));
}

TEST(ChannelAffine, Gradients) {
  std::mt19937_64 g(9);
  ChannelAffine aff(3, 0.5f);
  Rng rng = make_stream(10);
  aff.initialize(rng);
  for (auto& v : aff.shift.value) v = 0.1f;
  check_gradients(aff, random_tensor(2, 3, 4, 4, g));
}

TEST(Pooling, Gradients) {
  std::mt19937_64 g(12);
  MaxPool2d mp(2, 2);
  check_gradients(mp, random_tensor(2, 3, 6, 6, g));
  MaxPool2d padded(3, 2, 1);
  check_gradients(padded, random_tensor(1, 2, 7, 7, g));
  GlobalAvgPool gap;
  check_gradients(gap, random_tensor(2, 3, 5, 4, g));
  Flatten fl;
  check_gradients(fl, random_tensor(2, 3, 2, 2, g));
}

TEST(ReLU, ForwardAndGradient) {
  ReLU relu;
  Tensor x(1, 1, 1, 4);
  x.data = {-1.0f, 0.5f, 2.0f, -0.25f};
  Saved s;
  const Tensor y = relu.forward(x, &s);
  EXPECT_EQ(y.data, (FloatBuffer{0.0f, 0.5f, 2.0f, 0.0f}));
  Tensor dy(1, 1, 1, 4, 1.0f);
  EXPECT_EQ(relu.backward(dy, s).data, (FloatBuffer{0.0f, 1.0f, 1.0f, 0.0f}));
}

TEST(Residual, Gradients) {
  std::mt19937_64 g(13);
  Sequential main;
  main.add<Conv2d>(3, 3, 3, 1, 1);
  main.add<ReLU>();
  main.add<ChannelAffine>(3, 0.7f);
  Sequential shortcut;
  Residual res(std::move(main), std::move(shortcut));
  Rng rng = make_stream(14);
  res.initialize(rng);
  check_gradients(res, random_tensor(2, 3, 5, 5, g));

  Sequential m2;
  m2.add<Conv2d>(2, 4, 3, 2, 1);
  Sequential s2;
  s2.add<Conv2d>(2, 4, 1, 2, 0);
  Residual proj(std::move(m2), std::move(s2));
  proj.initialize(rng);
  check_gradients(proj, random_tensor(1, 2, 6, 6, g));
}

TEST(Sequential, GradientsAndClone) {
  std::mt19937_64 g(15);
  Sequential net;
  net.add<Conv2d>(2, 3, 3, 1, 1);
  net.add<ReLU>();
  net.add<MaxPool2d>(2, 2);
  net.add<Flatten>();
  net.add<Linear>(3 * 2 * 2, 4);
  Rng rng = make_stream(16);
  net.initialize(rng);
  const Tensor x = random_tensor(2, 2, 4, 4, g);
  check_gradients(net, x);
  const Sequential copy = net;
  EXPECT_EQ(copy.forward(x, nullptr).data, net.forward(x, nullptr).data);
  EXPECT_EQ(copy.size(), 5u);
}

TEST(Initialization, SeededAndDeterministic) {
  Conv2d a(3, 8, 3), b(3, 8, 3);
  Rng r1 = make_stream(5), r2 = make_stream(5);
  a.initialize(r1);
  b.initialize(r2);
  EXPECT_EQ(a.weight.value, b.weight.value);
  double ss = 0.0;
  for (float v : a.weight.value) ss += double(v) * v;
  // He initialization: variance 2 / fan_in.
  EXPECT_NEAR(ss / a.weight.value.size(), 2.0 / 27.0, 0.5 * 2.0 / 27.0);
}

TEST(Optimizers, DescendOnQuadratic) {
  for (int kind = 0; kind < 2; ++kind) {
    Param p;
    p.resize(3);
    p.value = {1.0f, -2.0f, 0.5f};
    std::unique_ptr<Optimizer> opt;
    if (kind == 0)
      opt = std::make_unique<Sgd>(0.1);
    else
      opt = std::make_unique<Adam>(0.05);
    auto loss = [&] {
      double s = 0;
      for (float v : p.value) s += double(v) * v;
      return s;
    };
    const double start = loss();
    for (int it = 0; it < 200; ++it) {
      zero_grad({&p});
      for (std::size_t i = 0; i < 3; ++i) p.grad[i] = 2.0f * p.value[i];
      opt->step({&p});
    }
    EXPECT_LT(loss(), 1e-2 * start) << kind;
  }
}

TEST(Optimizers, AdamFirstStepIsLearningRate) {
  Param p;
  p.resize(2);
  p.value = {0.0f, 0.0f};
  p.grad = {3.0f, -0.01f};
  Adam adam(1e-3);
  adam.step({&p});
  EXPECT_NEAR(p.value[0], -1e-3, 1e-6);
  EXPECT_NEAR(p.value[1], 1e-3, 1e-6);
}
