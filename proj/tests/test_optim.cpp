#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "xnet/errors.hpp"
#include "xnet/ops.hpp"
#include "xnet/optim.hpp"

using namespace xnet;

TEST(AdamW, FirstStepMatchesHandComputation) {
  std::vector<float> p{1.0f, -2.0f, 0.5f};
  const std::vector<float> g{0.1f, -0.3f, 0.0f};
  ParamState st;
  OptimizerConfig cfg;
  cfg.weight_decay = 0.01;
  optimizer_step(p, g, st, cfg, 0.1);
  const double init[] = {1.0, -2.0, 0.5};
  for (int i = 0; i < 3; ++i) {
    // bias-corrected first step: m_hat = g, v_hat = g^2
    const double gi = g[i];
    double expect = init[i] * (1 - 0.1 * 0.01);
    if (gi != 0) expect -= 0.1 * gi / (std::abs(gi) + 1e-8);
    EXPECT_NEAR(p[i], expect, 1e-6);
  }
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, MatchesDoubleReferenceOverSteps) {
  std::vector<float> p{0.3f};
  ParamState st;
  OptimizerConfig cfg;
  double x = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 50; ++t) {
    const double g = 2 * x - 1;  // d/dx (x^2 - x)
    const std::vector<float> gf{static_cast<float>(2.0 * p[0] - 1.0)};
    optimizer_step(p, gf, st, cfg, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x *= 1 - 0.01 * 0.01;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p[0], x, 1e-4);
}

TEST(Sgd, MomentumUpdate) {
  std::vector<float> p{1.0f};
  ParamState st;
  OptimizerConfig cfg{.kind = OptimizerKind::sgd_momentum, .momentum = 0.5, .weight_decay = 0.0};
  optimizer_step(p, std::vector<float>{1.0f}, st, cfg, 0.1);
  EXPECT_NEAR(p[0], 0.9f, 1e-7);
  optimizer_step(p, std::vector<float>{1.0f}, st, cfg, 0.1);
  EXPECT_NEAR(p[0], 0.9f - 0.15f, 1e-7);
}

TEST(Optimizer, MinimisesQuadratic) {
  auto w = xt::random_tensor(Shape{8}, 1, -2, 2, true);
  Optimizer opt({w}, OptimizerConfig{.lr = 0.05, .weight_decay = 0.0});
  double first = 0, last = 0;
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto loss = ops::sum_all(ops::mul(w, w));
    if (i == 0) first = loss.item();
    last = loss.item();
    tape.backward(loss);
    opt.step();
  }
  EXPECT_LT(last, 1e-3 * first);
}

TEST(Optimizer, Validation) {
  EXPECT_THROW(Optimizer({}, OptimizerConfig{.lr = 0.0}), ConfigError);
  EXPECT_EQ(optimizer_kind_from_string("adamw"), OptimizerKind::adamw);
  EXPECT_EQ(optimizer_kind_from_string(to_string(OptimizerKind::sgd_momentum)), OptimizerKind::sgd_momentum);
  EXPECT_THROW(optimizer_kind_from_string("lamb"), ConfigError);
  std::vector<float> p{1.0f, 2.0f};
  ParamState st;
  EXPECT_THROW(optimizer_step(p, std::vector<float>{1.0f}, st, {}, 0.1), ValidationError);
}

TEST(Warmup, LinearRampThenConstant) {
  // 100 steps, 5% warmup -> 5 ramp steps
  EXPECT_DOUBLE_EQ(warmup_lr(1.0, 0, 100, 0.05), 0.2);
  EXPECT_DOUBLE_EQ(warmup_lr(1.0, 4, 100, 0.05), 1.0);
  EXPECT_DOUBLE_EQ(warmup_lr(1.0, 50, 100, 0.05), 1.0);
  EXPECT_DOUBLE_EQ(warmup_lr(2.0, 3, 100, 0.0), 2.0);
}
