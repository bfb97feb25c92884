#include <gtest/gtest.h>

#include <cmath>

#include "arig/train.hpp"

using namespace arig;

namespace {

DiffParams<double> live(DiffDims d, std::uint64_t seed) {
  auto p = DiffParams<double>::shaped(d);
  initialize(p, {seed, false});
  return p;
}

std::vector<double> normals(CounterRng& rng, std::size_t n) {
  std::vector<double> v(n);
  rng.fill_normal(std::span<double>(v));
  return v;
}

}  // namespace

TEST(Backward, ReturnsTheForwardLoss) {
  auto p = live({5, 3, 6, 4, 8}, 1);
  CounterRng rng(1, 1);
  auto x0 = normals(rng, 5), z = normals(rng, 3), e = normals(rng, 5);
  auto sched = build_schedule(1000, 1e-4, 0.02, 15);
  auto g = zero_grads<double>(p.dims);
  const double l = denoise_loss_backward<double>(p, x0, z, 400, e, sched, g);
  EXPECT_EQ(l, denoise_loss<double>(p, x0, z, 400, e, sched));
}

TEST(Backward, HeadBiasGradientIsTwiceResidual) {
  auto p = live({2, 2, 3, 2, 4}, 2);
  CounterRng rng(2, 1);
  auto x = normals(rng, 2), z = normals(rng, 2), e = normals(rng, 2);
  auto g = zero_grads<double>(p.dims);
  diffmlp_backward<double>(p, x, 50.0, z, e, g);
  auto out = denoiser_eps<double>(p, x, 50.0, z);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(g.head.b(0, i), 2.0 * (out[i] - e[i]), 1e-14);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  auto p = live({3, 3, 4, 4, 4}, 3);
  CounterRng rng(3, 1);
  auto x = normals(rng, 3), z = normals(rng, 3), e = normals(rng, 3);
  auto g1 = zero_grads<double>(p.dims), g2 = zero_grads<double>(p.dims);
  diffmlp_backward<double>(p, x, 7.0, z, e, g1);
  diffmlp_backward<double>(p, x, 7.0, z, e, g2);
  diffmlp_backward<double>(p, x, 7.0, z, e, g2);
  auto a = tensor_list(g1), b = tensor_list(g2);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->size(); ++i) EXPECT_NEAR(b[k]->data()[i], 2 * a[k]->data()[i], 1e-12);
  }
}

TEST(Gradcheck, Dim8ToyWithinTolerance) {
  auto r = gradcheck_toy(7, 8);
  EXPECT_EQ(r.tensors.size(), 6u + 3u * 10u + 6u);
  for (const auto& e : r.tensors) {
    EXPECT_LE(e.rel_error, 1e-4) << e.name;
    EXPECT_GT(e.max_abs_analytic, 0.0) << e.name;
  }
}

TEST(Gradcheck, OtherSeedsAndTimesteps) {
  for (std::uint64_t seed : {11u, 12u}) {
    auto p = live({6, 5, 7, 6, 8}, seed);
    CounterRng rng(seed, 3);
    auto x = normals(rng, 6), z = normals(rng, 5), e = normals(rng, 6);
    for (double t : {0.0, 999.0}) EXPECT_LE(gradcheck(p, x, t, z, e).worst, 1e-4);
  }
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  std::vector<double> w{1.0, -2.0}, g{0, 0}, m(2, 0), v(2, 0);
  AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.5;
  adamw_update<double>(w, g, m, v, c, 1);
  EXPECT_DOUBLE_EQ(w[0], 0.95);
  EXPECT_DOUBLE_EQ(w[1], -1.9);
}

TEST(AdamW, ScalarFirstStepByHand) {
  // First step: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
  std::vector<double> w{0.5}, g{0.2}, m{0}, v{0};
  AdamWConfig c;
  c.lr = 0.01;
  c.weight_decay = 0.0;
  adamw_update<double>(w, g, m, v, c, 1);
  EXPECT_NEAR(w[0], 0.5 - 0.01 * 0.2 / (0.2 + 1e-8), 1e-15);
  EXPECT_NEAR(m[0], 0.1 * 0.2, 1e-15);
  EXPECT_NEAR(v[0], 0.001 * 0.04, 1e-15);
  // Second step with the same gradient: bias-corrected moments still equal g and g^2.
  adamw_update<double>(w, g, m, v, c, 2);
  EXPECT_NEAR(w[0], 0.5 - 2 * 0.01 * 0.2 / (0.2 + 1e-8), 1e-12);
}

TEST(AdamW, ShapeMismatchThrows) {
  std::vector<double> w{1, 2}, g{1}, m(2), v(2);
  EXPECT_THROW(adamw_update<double>(w, g, m, v, AdamWConfig{}, 1), ConfigError);
}

TEST(AdamW, StepOverBundleMovesAgainstGradient) {
  auto p = live({3, 3, 4, 4, 4}, 4);
  auto before = p;
  auto g = zero_grads<double>(p.dims);
  for (auto* t : tensor_list(g)) {
    for (double& v : t->flat()) v = 1.0;
  }
  AdamWConfig c;
  c.weight_decay = 0.0;
  auto opt = make_optimizer(p, c);
  adamw_step(p, g, opt);
  EXPECT_EQ(opt.step, 1u);
  auto a = tensor_list(before), b = tensor_list(p);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->size(); ++i) EXPECT_LT(b[k]->data()[i], a[k]->data()[i]);
  }
}

TEST(ToyTraining, ShortRunIsDeterministic) {
  ToyTrainConfig cfg;
  cfg.steps = 30;
  cfg.batch = 8;
  cfg.smooth_window = 10;
  cfg.eval_samples = 20;
  cfg.width = 16;
  cfg.cond_dim = 16;
  cfg.timestep_dim = 16;
  DiffParams<float> p1, p2;
  auto a = train_toy(cfg, &p1);
  auto b = train_toy(cfg, &p2);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.max_mean_error, b.max_mean_error);
  auto ta = tensor_list(p1), tb = tensor_list(p2);
  for (std::size_t k = 0; k < ta.size(); ++k) EXPECT_EQ(*ta[k], *tb[k]);
  EXPECT_EQ(a.losses.size(), 30u);
  cfg.seed = 2;
  EXPECT_NE(train_toy(cfg).losses, a.losses);
}

TEST(ToyTraining, RejectsEmptyConfig) {
  ToyTrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(train_toy(cfg), ConfigError);
}
