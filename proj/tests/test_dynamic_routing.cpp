#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace dydit;
using namespace dydit::testing;

namespace {

using Mask = std::vector<std::uint8_t>;

RouterParams<float> make_router(int c, int h) {
  RouterParams<float> p;
  p.head_w = Tensor(Shape{c, h});
  p.head_b = Tensor(Shape{h});
  p.channel_w = Tensor(Shape{c, h});
  p.channel_b = Tensor(Shape{h});
  p.token_w = Tensor(Shape{c, 1});
  p.token_b = Tensor(Shape{1});
  return p;
}

ProtectionIndex protect(int head, int group) {
  ProtectionIndex p;
  p.head = head;
  p.group = group;
  return p;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(RouteWidth, ThresholdsEvalScores) {
  auto p = make_router(2, 4);
  // logits = e_t . W + b with e_t = [1, 0]: row 0 of W plus bias.
  const std::vector<float> w0{3, -3, 0.5f, -0.5f};
  for (int j = 0; j < 4; ++j) p.head_w.mutable_data()[static_cast<std::size_t>(j)] = w0[static_cast<std::size_t>(j)];
  p.channel_b.mutable_data()[1] = 1.0f;
  for (int j : {0, 2, 3}) p.channel_b.mutable_data()[static_cast<std::size_t>(j)] = -1.0f;
  Tensor e(Shape{1, 2});
  e.mutable_data()[0] = 1.0f;
  auto d = route_width(e, p, protect(0, 0), RouteMode::kEval, 1.0, nullptr);
  EXPECT_EQ(d.head_mask, (Mask{1, 0, 1, 0}));
  EXPECT_EQ(d.channel_mask, (Mask{1, 1, 0, 0}));  // group 0 protected
  EXPECT_EQ(d.active_heads(0), 2);
  EXPECT_EQ(d.active_groups(0), 2);
  EXPECT_NEAR(d.head_scores[0], sigmoid_ref(3), 1e-6);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(d.head_gate[static_cast<std::size_t>(j)], d.head_mask[static_cast<std::size_t>(j)]);
}

TEST(RouteWidth, ProtectedHeadSurvivesStronglyNegativeLogits) {
  auto p = make_router(3, 4);
  for (auto& v : p.head_b.mutable_data()) v = -20.0f;
  for (auto& v : p.channel_b.mutable_data()) v = -20.0f;
  Rng rng(1);
  auto e = randn(rng, {5, 3});
  for (auto mode : {RouteMode::kEval, RouteMode::kTrain}) {
    auto d = route_width(e, p, protect(2, 1), mode, 1.0, &rng);
    for (int b = 0; b < 5; ++b) {
      EXPECT_EQ(d.head_row(b), (Mask{0, 0, 1, 0}));
      EXPECT_EQ(d.channel_row(b), (Mask{0, 1, 0, 0}));
    }
  }
}

TEST(RouteWidth, FreshRoutersKeepEverything) {
  const auto cfg = toy_config();
  auto model = init_model<float>(cfg, toy_diffusion(), 2);
  Rng rng(3);
  std::vector<int> ts(100);
  std::iota(ts.begin(), ts.end(), 1);
  auto e = timestep_embed(model, ts);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& r = model.routers[static_cast<std::size_t>(l)];
    for (float v : r.head_w.data()) EXPECT_EQ(v, 0.0f);
    for (float v : r.head_b.data()) EXPECT_EQ(v, 2.0f);
    auto d = route_width(e, r, model.protection[static_cast<std::size_t>(l)], RouteMode::kEval, 1.0, nullptr);
    for (auto m : d.head_mask) EXPECT_EQ(m, 1);
    for (auto m : d.channel_mask) EXPECT_EQ(m, 1);
  }
}

TEST(RouteWidth, AtLeastOneActiveForEveryTimestep) {
  const auto cfg = toy_config();
  auto model = random_model<float>(cfg, 4);
  Rng rng(5);
  for (auto& r : model.routers) {
    for (auto* t : {&r.head_w, &r.channel_w})
      for (auto& v : t->mutable_data()) v = static_cast<float>(rng.normal() * 3);
    for (auto* t : {&r.head_b, &r.channel_b})
      for (auto& v : t->mutable_data()) v = -4.0f;
  }
  compute_protection(model);
  std::vector<int> ts(100);
  std::iota(ts.begin(), ts.end(), 1);
  auto e = timestep_embed(model, ts);
  for (int l = 0; l < cfg.layers; ++l)
    for (auto mode : {RouteMode::kEval, RouteMode::kTrain}) {
      const auto l_ = static_cast<std::size_t>(l);
      auto d = route_width(e, model.routers[l_], model.protection[l_], mode, 1.0, &rng);
      for (int b = 0; b < 100; ++b) {
        EXPECT_GE(d.active_heads(b), 1);
        EXPECT_GE(d.active_groups(b), 1);
        EXPECT_EQ(d.head_mask[static_cast<std::size_t>(b * cfg.heads + model.protection[l_].head)], 1);
        EXPECT_EQ(d.channel_mask[static_cast<std::size_t>(b * cfg.heads + model.protection[l_].group)], 1);
      }
    }
}

TEST(RouteWidth, EvalIsDeterministicAndIgnoresRandomStream) {
  Rng rng(6);
  auto p = make_router(8, 4);
  for (auto* t : {&p.head_w, &p.channel_w})
    for (auto& v : t->mutable_data()) v = static_cast<float>(rng.normal());
  auto e = randn(rng, {16, 8});
  Rng a(1), b(2);
  auto x = route_width(e, p, protect(0, 0), RouteMode::kEval, 1.0, &a);
  auto y = route_width(e, p, protect(0, 0), RouteMode::kEval, 1.0, &b);
  EXPECT_EQ(x.head_mask, y.head_mask);
  EXPECT_EQ(x.channel_mask, y.channel_mask);
  EXPECT_TRUE(bit_equal(x.head_scores, y.head_scores));
}

TEST(RouteWidth, Errors) {
  auto p = make_router(4, 2);
  Rng rng(7);
  auto e = randn(rng, {2, 4});
  EXPECT_THROW(route_width(e, p, protect(0, 0), RouteMode::kTrain, 1.0, nullptr), Error);
  EXPECT_THROW(route_width(e, p, protect(0, 0), RouteMode::kTrain, 0.0, &rng), Error);
  EXPECT_THROW(route_width(e, p, protect(0, 0), RouteMode::kEval, -1.0, nullptr), Error);
  EXPECT_THROW(route_width(randn(rng, {2, 3}), p, protect(0, 0), RouteMode::kEval, 1.0, nullptr), Error);
}

TEST(RouteWidth, InputsAreDetached) {
  Rng rng(8);
  auto p = make_router(4, 2);
  p.head_w = leaf(rng, {4, 2});
  p.head_b.set_requires_grad(true);
  auto e = leaf(rng, {3, 4});
  auto d = route_width(e, p, protect(0, 0), RouteMode::kTrain, 1.0, &rng);
  reverse_accumulate(sum(d.head_gate));
  EXPECT_FALSE(e.has_grad());
  ASSERT_TRUE(p.head_w.has_grad());
  double norm = 0;
  for (float g : p.head_w.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(RouteTokens, MatchesScalarLoop) {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const int c = 8, batch = 2, n = 6;
    auto p = make_router(c, 2);
    for (auto& v : p.token_w.mutable_data()) v = static_cast<float>(rng.normal());
    p.token_b.mutable_data()[0] = static_cast<float>(rng.normal());
    auto x = randn(rng, {batch * n, c});
    auto d = route_tokens(x, p, RouteMode::kEval, 1.0, nullptr, batch);
    ASSERT_EQ(d.mask.size(), static_cast<std::size_t>(batch * n));
    int active0 = 0;
    for (int r = 0; r < batch * n; ++r) {
      double z = p.token_b[0];
      for (int j = 0; j < c; ++j) z += static_cast<double>(x[static_cast<std::size_t>(r * c + j)]) * p.token_w[static_cast<std::size_t>(j)];
      const double s = sigmoid_ref(z);
      EXPECT_NEAR(d.scores[static_cast<std::size_t>(r)], s, 1e-5);
      if (std::abs(s - 0.5) > 1e-5) {
        EXPECT_EQ(d.mask[static_cast<std::size_t>(r)], s >= 0.5 ? 1 : 0);
      }
      if (r < n) active0 += d.mask[static_cast<std::size_t>(r)];
    }
    EXPECT_EQ(d.active_tokens(0), active0);
  }
}

TEST(RouteTokens, NoProtectionAndShapeChecks) {
  auto p = make_router(4, 2);
  p.token_b.mutable_data()[0] = -30.0f;
  Rng rng(10);
  auto x = randn(rng, {6, 4});
  auto d = route_tokens(x, p, RouteMode::kEval, 1.0, nullptr, 2);
  EXPECT_EQ(d.active_tokens(0) + d.active_tokens(1), 0);
  EXPECT_THROW(route_tokens(x, p, RouteMode::kEval, 1.0, nullptr, 4), Error);
  EXPECT_THROW(route_tokens(randn(rng, {6, 5}), p, RouteMode::kEval, 1.0, nullptr, 1), Error);
}

TEST(GumbelSigmoid, EqualNoiseReducesToSigmoid) {
  Rng rng(11);
  auto logits = randn(rng, {4, 5}, 3.0);
  auto g = randn(rng, {4, 5});
  for (double temp : {0.5, 1.0, 2.0}) {
    auto s = gumbel_sigmoid(logits, temp, g, g);
    for (std::size_t i = 0; i < s.data().size(); ++i)
      EXPECT_NEAR(s[i], sigmoid_ref(logits[i] / temp), 1e-6);
  }
}

TEST(GumbelSigmoid, LargeLogitSaturates) {
  Rng rng(12);
  Tensor logits(Shape{1000}, 40.0f);
  auto s = gumbel_sigmoid(logits, 1.0, rng);
  for (auto m : threshold_mask<float>(s.data())) EXPECT_EQ(m, 1);
  for (float v : s.data()) EXPECT_GT(v, 0.999f);
}

TEST(GumbelSigmoid, ZeroLogitMeanIsOneHalf) {
  Rng rng(13);
  Tensor logits(Shape{100000});
  auto s = gumbel_sigmoid(logits, 1.0, rng);
  double mean = 0;
  std::size_t on = 0;
  for (float v : s.data()) {
    mean += v;
    on += v >= 0.5f;
  }
  mean /= 100000.0;
  EXPECT_GE(mean, 0.49);
  EXPECT_LE(mean, 0.51);
  EXPECT_NEAR(static_cast<double>(on) / 100000.0, 0.5, 0.01);
}

TEST(StraightThrough, ForwardIsHardGradientIsOnes) {
  Rng rng(14);
  auto soft = leaf(rng, {3, 4});
  auto hard = mask_tensor<float>(random_mask(rng, 12), {3, 4});
  auto y = straight_through(hard, soft);
  EXPECT_TRUE(bit_equal(y, hard));
  reverse_accumulate(sum(y));
  for (float g : soft.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(StraightThrough, GradientEqualsSoftPathGradient) {
  // Through the gate, router parameters see the gradient of the soft scores.
  Rng rng(15);
  auto p = make_router(4, 3);
  p.head_w = leaf(rng, {4, 3});
  auto e = randn(rng, {5, 4});
  auto weight = randn(rng, {5, 3});
  Rng a(99), b(99);
  auto d = route_width(e, p, protect(0, 0), RouteMode::kTrain, 1.0, &a);
  reverse_accumulate(sum(mul(d.head_gate, weight)));
  const std::vector<float> via_gate(p.head_w.grad().begin(), p.head_w.grad().end());
  p.head_w.zero_grad();
  auto d2 = route_width(e, p, protect(0, 0), RouteMode::kTrain, 1.0, &b);
  reverse_accumulate(sum(mul(d2.head_scores, weight)));
  EXPECT_EQ(d.head_mask, d2.head_mask);
  const auto via_soft = p.head_w.grad();
  for (std::size_t i = 0; i < via_gate.size(); ++i) EXPECT_NEAR(via_gate[i], via_soft[i], 1e-6 * (1 + std::abs(via_soft[i])));
}

TEST(MagnitudeRank, ZeroHeadRanksLast) {
  const auto cfg = tiny_config(1, 16, 4);
  auto model = random_model<float>(cfg, 16);
  auto& b = model.blocks[0];
  const int ch = cfg.head_dim();
  for (auto* w : {&b.w_q, &b.w_k, &b.w_v})
    for (int r = 0; r < cfg.channels; ++r)
      for (int j = ch; j < 2 * ch; ++j) w->mutable_data()[static_cast<std::size_t>(r * 16 + j)] = 0.0f;
  for (int r = ch; r < 2 * ch; ++r)
    for (int j = 0; j < 16; ++j) b.w_o.mutable_data()[static_cast<std::size_t>(r * 16 + j)] = 0.0f;
  auto p = magnitude_rank(b, cfg.heads);
  EXPECT_EQ(p.head_rank.back(), 1);
  EXPECT_NE(p.head, 1);
}

TEST(MagnitudeRank, TiesGoToLowerIndex) {
  const auto cfg = tiny_config(1, 8, 2);
  auto model = init_model<float>(cfg, toy_diffusion(), 17);
  auto& b = model.blocks[0];
  for (auto* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_1, &b.w_2})
    for (auto& v : w->mutable_data()) v = 0.25f;
  auto p = magnitude_rank(b, cfg.heads);
  EXPECT_EQ(p.head, 0);
  EXPECT_EQ(p.group, 0);
  EXPECT_EQ(p.head_rank, (std::vector<int>{0, 1}));
  EXPECT_EQ(p.group_rank, (std::vector<int>{0, 1}));
}

TEST(MagnitudeRank, MatchesFlatLoopOracle) {
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const int heads = static_cast<int>(rng.integer(1, 4));
    const auto cfg = tiny_config(1, heads * 4, heads);
    auto model = random_model<float>(cfg, 300 + trial);
    const auto& b = model.blocks[0];
    // Attribute every entry to its unit by flat index.
    std::vector<double> hs(static_cast<std::size_t>(heads)), gs(static_cast<std::size_t>(heads));
    const int ch = cfg.head_dim(), gd = cfg.group_dim();
    for (const auto* w : {&b.w_q, &b.w_k, &b.w_v}) {
      const auto d = w->data();
      for (std::size_t i = 0; i < d.size(); ++i) hs[(i % static_cast<std::size_t>(w->dim(1))) / static_cast<std::size_t>(ch)] += static_cast<double>(d[i]) * d[i];
    }
    {
      const auto d = b.w_o.data();
      for (std::size_t i = 0; i < d.size(); ++i) hs[(i / static_cast<std::size_t>(b.w_o.dim(1))) / static_cast<std::size_t>(ch)] += static_cast<double>(d[i]) * d[i];
    }
    {
      const auto d = b.w_1.data();
      for (std::size_t i = 0; i < d.size(); ++i) gs[(i % static_cast<std::size_t>(b.w_1.dim(1))) / static_cast<std::size_t>(gd)] += static_cast<double>(d[i]) * d[i];
      const auto e = b.w_2.data();
      for (std::size_t i = 0; i < e.size(); ++i) gs[(i / static_cast<std::size_t>(b.w_2.dim(1))) / static_cast<std::size_t>(gd)] += static_cast<double>(e[i]) * e[i];
    }
    auto hm = head_magnitudes(b, heads);
    auto gm = group_magnitudes(b, heads);
    for (int h = 0; h < heads; ++h) {
      EXPECT_NEAR(hm[static_cast<std::size_t>(h)], std::sqrt(hs[static_cast<std::size_t>(h)]), 1e-9 * (1 + hm[static_cast<std::size_t>(h)]));
      EXPECT_NEAR(gm[static_cast<std::size_t>(h)], std::sqrt(gs[static_cast<std::size_t>(h)]), 1e-9 * (1 + gm[static_cast<std::size_t>(h)]));
    }
    const auto p = magnitude_rank(b, heads);
    EXPECT_EQ(p.head, static_cast<int>(std::max_element(hs.begin(), hs.end()) - hs.begin()));
    EXPECT_EQ(p.group, static_cast<int>(std::max_element(gs.begin(), gs.end()) - gs.begin()));
    for (std::size_t i = 1; i < p.head_rank.size(); ++i)
      EXPECT_GE(hs[static_cast<std::size_t>(p.head_rank[i - 1])], hs[static_cast<std::size_t>(p.head_rank[i])]);
  }
}

TEST(Routers, LayersDoNotShareParameters) {
  const auto cfg = toy_config();
  auto model = init_model<float>(cfg, toy_diffusion(), 19);
  ASSERT_EQ(model.routers.size(), 2u);
  EXPECT_NE(model.routers[0].head_w.data().data(), model.routers[1].head_w.data().data());
  EXPECT_NE(model.routers[0].token_b.data().data(), model.routers[1].token_b.data().data());
  Rng rng(20);
  auto e = randn(rng, {4, cfg.channels});
  auto before = route_width(e, model.routers[1], model.protection[1], RouteMode::kEval, 1.0, nullptr);
  for (auto& v : model.routers[0].head_b.mutable_data()) v = -50.0f;
  auto after = route_width(e, model.routers[1], model.protection[1], RouteMode::kEval, 1.0, nullptr);
  EXPECT_TRUE(bit_equal(before.head_scores, after.head_scores));
}
