#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace dydit;
using namespace dydit::testing;

namespace {

using Mask = std::vector<std::uint8_t>;

// Random (config, block) with C = H * C_H.
struct BlockCase {
  ModelConfig cfg;
  DitModel<float> model;
};

BlockCase random_block_case(Rng& rng) {
  const int heads = static_cast<int>(rng.integer(1, 4));
  const int head_dim = static_cast<int>(rng.integer(1, 3)) * 2;
  auto cfg = tiny_config(1, heads * head_dim, heads);
  return {cfg, random_model<float>(cfg, rng.engine()())};
}

// Orthonormal rows (rows <= cols) by Gram-Schmidt in double.
BasicTensor<double> orthonormal_rows(Rng& rng, int rows, int cols) {
  std::vector<std::vector<double>> q;
  while (static_cast<int>(q.size()) < rows) {
    std::vector<double> v(static_cast<std::size_t>(cols));
    for (auto& x : v) x = rng.normal();
    for (const auto& u : q) {
      double d = 0;
      for (int i = 0; i < cols; ++i) d += v[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
      for (int i = 0; i < cols; ++i) v[static_cast<std::size_t>(i)] -= d * u[static_cast<std::size_t>(i)];
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  BasicTensor<double> out(Shape{rows, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.mutable_data()[static_cast<std::size_t>(r * cols + c)] = q[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  return out;
}

}  // namespace

TEST(Patchify, CountsTokens) {
  ModelConfig cfg = tiny_config();
  cfg.extent = 4;
  cfg.patch = 2;
  cfg.channels_in = 1;
  Rng rng(1);
  auto img = random_images(rng, cfg, 1);
  EXPECT_EQ(patchify_data(img, cfg).dim(0), 4);
  EXPECT_EQ(cfg.tokens(), 4);
}

TEST(Patchify, IdentityProjectionCopiesPatchValues) {
  ModelConfig cfg = tiny_config(1, 4, 2);  // patch_dim = 2*2*1 = 4 = C
  Tensor img(Shape{1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) img.mutable_data()[static_cast<std::size_t>(i)] = static_cast<float>(i);
  Tensor eye(Shape{4, 4});
  for (int i = 0; i < 4; ++i) eye.mutable_data()[static_cast<std::size_t>(i * 5)] = 1.0f;
  auto tokens = patchify(img, cfg, eye, Tensor(Shape{4}), Tensor(Shape{4, 4}));
  // Token 1 is the top-right patch: pixels (0,2) (0,3) (1,2) (1,3).
  const std::vector<float> want{2, 3, 6, 7};
  for (int j = 0; j < 4; ++j) EXPECT_EQ(tokens[static_cast<std::size_t>(4 + j)], want[static_cast<std::size_t>(j)]);
  const std::vector<float> last{10, 11, 14, 15};
  for (int j = 0; j < 4; ++j) EXPECT_EQ(tokens[static_cast<std::size_t>(12 + j)], last[static_cast<std::size_t>(j)]);
}

TEST(Patchify, PseudoInverseRoundTrip) {
  Rng rng(2);
  ModelConfig cfg = toy_config();  // patch_dim 48, C 64
  auto img = random_images<double>(rng, cfg, 2);
  auto proj = orthonormal_rows(rng, cfg.patch_dim(), cfg.channels);
  auto pos = positional_table<double>(cfg);
  auto tokens = patchify(img, cfg, proj, BasicTensor<double>(Shape{cfg.channels}), pos);
  auto tiled = concat<double>({pos, pos}, 0);
  auto rows = matmul(sub(tokens, tiled), transpose(proj));
  EXPECT_LE(max_rel_err(unpatchify_data(rows, cfg), img), 1e-5);
  EXPECT_TRUE(bit_equal(unpatchify_data(patchify_data(img, cfg), cfg), img));
}

TEST(Patchify, RejectsIndivisibleExtentAndWrongShape) {
  ModelConfig cfg = tiny_config();
  cfg.extent = 5;
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_THROW(patchify_data(Tensor(Shape{1, 1, 5, 5}), cfg), Error);
  EXPECT_THROW(patchify_data(Tensor(Shape{1, 2, 4, 4}), tiny_config()), Error);
}

TEST(TimestepEmbed, RawFeaturesAtZero) {
  const std::vector<int> ts{0};
  auto f = timestep_features<float>(ts, 16);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(f[static_cast<std::size_t>(i)], 1.0f);      // cosine half
    EXPECT_EQ(f[static_cast<std::size_t>(8 + i)], 0.0f);  // sine half
  }
}

TEST(TimestepEmbed, DeterministicAndDistinctAcrossToySchedule) {
  const auto cfg = toy_config();
  auto model = init_model<float>(cfg, toy_diffusion(), 3);
  std::vector<int> ts;
  for (int t = 1; t <= 100; ++t) ts.push_back(t);
  auto e = timestep_embed(model, ts);
  EXPECT_TRUE(bit_equal(e, timestep_embed(model, ts)));
  const auto c = static_cast<std::size_t>(cfg.channels);
  for (std::size_t a = 0; a < ts.size(); ++a)
    for (std::size_t b = a + 1; b < ts.size(); ++b) {
      double d = 0;
      for (std::size_t j = 0; j < c; ++j) d = std::max(d, std::abs(static_cast<double>(e[a * c + j]) - e[b * c + j]));
      EXPECT_GE(d, 1e-6) << "t = " << ts[a] << " vs " << ts[b];
    }
}

TEST(TimestepEmbed, RejectsOutOfRange) {
  auto model = init_model<float>(tiny_config(), toy_diffusion(), 4);
  const std::vector<int> bad{101};
  EXPECT_THROW(timestep_embed(model, bad), Error);
}

TEST(ClassEmbed, LookupAndNullRow) {
  const auto cfg = tiny_config();
  auto model = random_model<float>(cfg, 5);
  const std::vector<int> ys{1, 1, cfg.null_label()};
  auto e = class_embed(model, ys);
  const auto c = static_cast<std::size_t>(cfg.channels);
  for (std::size_t j = 0; j < c; ++j) {
    EXPECT_EQ(e[j], e[c + j]);
    EXPECT_EQ(e[c + j], model.class_table[c + j]);
    EXPECT_EQ(e[2 * c + j], model.class_table[static_cast<std::size_t>(cfg.classes) * c + j]);
  }
  EXPECT_THROW(class_embed(model, std::vector<int>{-1}), Error);
  EXPECT_THROW(class_embed(model, std::vector<int>{cfg.classes + 1}), Error);
}

TEST(AdaLN, ZeroInitGivesZeroModulation) {
  const auto cfg = tiny_config();
  auto model = init_model<float>(cfg, toy_diffusion(), 6);
  Rng rng(7);
  auto m = adaln_modulate(randn(rng, {2, cfg.channels}), randn(rng, {2, cfg.channels}), model.blocks[0]);
  for (const auto* v : {&m.shift_attn, &m.scale_attn, &m.gate_attn, &m.shift_mlp, &m.scale_mlp, &m.gate_mlp})
    for (float x : v->data()) EXPECT_EQ(x, 0.0f);
}

TEST(AdaLN, DeterministicAndDifferentiable) {
  const auto cfg = tiny_config();
  auto model = random_model<double>(cfg, 8);
  Rng rng(9);
  auto e_t = randn<double>(rng, {2, cfg.channels});
  auto e_c = randn<double>(rng, {2, cfg.channels});
  auto x = randn<double>(rng, {2 * cfg.tokens(), cfg.channels});
  auto a = adaln_modulate(e_t, e_c, model.blocks[0]);
  auto b = adaln_modulate(e_t, e_c, model.blocks[0]);
  EXPECT_TRUE(bit_equal(a.gate_mlp, b.gate_mlp));
  EXPECT_TRUE(bit_equal(a.shift_attn, b.shift_attn));

  auto projection = randn<double>(rng, x.shape());
  auto& block = model.blocks[0];
  auto loss_with = [&](BasicTensor<double>& slot) {
    return [&](const BasicTensor<double>& p) {
      auto saved = slot;
      slot = p;
      auto m = adaln_modulate(e_t, e_c, block);
      auto h = detail::modulate(layer_norm(x), m.shift_attn, m.scale_attn, cfg.tokens());
      auto y = mul(detail::per_token(m.gate_mlp, cfg.tokens()), h);
      slot = saved;
      return sum(mul(y, projection));
    };
  };
  for (auto* slot : {&block.ada_w, &block.ada_b, &e_t}) {
    auto point = slot->clone();
    EXPECT_LE(finite_difference_check<double>(loss_with(*slot), point, 1e-5), 1e-3);
  }
}

TEST(Mhsa, FullMaskEqualsStaticExactly) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto bc = random_block_case(rng);
    auto x = randn(rng, {static_cast<int>(rng.integer(1, 9)), bc.cfg.channels});
    const Mask all(static_cast<std::size_t>(bc.cfg.heads), 1);
    auto ref = mhsa_forward(x, bc.model.blocks[0], bc.cfg, all, ExecMode::kStatic);
    EXPECT_TRUE(bit_equal(mhsa_forward(x, bc.model.blocks[0], bc.cfg, all, ExecMode::kTrainMasked), ref));
    EXPECT_TRUE(bit_equal(mhsa_forward(x, bc.model.blocks[0], bc.cfg, all, ExecMode::kInferSliced), ref));
  }
}

TEST(Mhsa, SingleActiveHeadMatchesSingleHeadReference) {
  Rng rng(11);
  const auto cfg = tiny_config(1, 8, 2);
  const int ch = cfg.head_dim(), c = cfg.channels, n = 5;
  for (int trial = 0; trial < 5; ++trial) {
    auto model = random_model<float>(cfg, 100 + trial);
    const auto& w = model.blocks[0];
    auto x = randn(rng, {n, c});
    // Independent scalar reference using only head-0 columns / rows.
    auto at = [](const Tensor& t, int r, int col) {
      return static_cast<double>(t[static_cast<std::size_t>(r * t.dim(1) + col)]);
    };
    std::vector<double> q(static_cast<std::size_t>(n * ch)), k(q.size()), v(q.size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < ch; ++j)
        for (int r = 0; r < c; ++r) {
          q[static_cast<std::size_t>(i * ch + j)] += at(x, i, r) * at(w.w_q, r, j);
          k[static_cast<std::size_t>(i * ch + j)] += at(x, i, r) * at(w.w_k, r, j);
          v[static_cast<std::size_t>(i * ch + j)] += at(x, i, r) * at(w.w_v, r, j);
        }
    BasicTensor<double> ref(Shape{n, c});
    for (int i = 0; i < n; ++i) {
      std::vector<double> s(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double d = 0;
        for (int e = 0; e < ch; ++e) d += q[static_cast<std::size_t>(i * ch + e)] * k[static_cast<std::size_t>(j * ch + e)];
        s[static_cast<std::size_t>(j)] = d / std::sqrt(static_cast<double>(ch));
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      std::vector<double> o(static_cast<std::size_t>(ch), 0.0);
      for (int j = 0; j < n; ++j)
        for (int e = 0; e < ch; ++e) o[static_cast<std::size_t>(e)] += s[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>(j * ch + e)];
      for (int col = 0; col < c; ++col) {
        double acc = 0;
        for (int e = 0; e < ch; ++e) acc += o[static_cast<std::size_t>(e)] * at(w.w_o, e, col);
        ref.mutable_data()[static_cast<std::size_t>(i * c + col)] = acc;
      }
    }
    for (auto mode : {ExecMode::kTrainMasked, ExecMode::kInferSliced})
      EXPECT_LE(max_rel_err(mhsa_forward(x, w, cfg, Mask{1, 0}, mode), ref), 1e-5);
  }
}

TEST(Mhsa, MaskedAndSlicedAgreeOnRandomMasks) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    auto bc = random_block_case(rng);
    auto x = randn(rng, {static_cast<int>(rng.integer(1, 9)), bc.cfg.channels});
    auto m = random_mask(rng, bc.cfg.heads, 0.5, true);
    auto masked = mhsa_forward(x, bc.model.blocks[0], bc.cfg, m, ExecMode::kTrainMasked);
    auto sliced = mhsa_forward(x, bc.model.blocks[0], bc.cfg, m, ExecMode::kInferSliced);
    EXPECT_LE(max_rel_err(sliced, masked), 1e-5) << "trial " << trial;
  }
}

TEST(Mhsa, EmptyHeadMaskRejected) {
  Rng rng(13);
  auto bc = random_block_case(rng);
  auto x = randn(rng, {3, bc.cfg.channels});
  const Mask none(static_cast<std::size_t>(bc.cfg.heads), 0);
  EXPECT_THROW(mhsa_forward(x, bc.model.blocks[0], bc.cfg, none, ExecMode::kTrainMasked), Error);
  EXPECT_THROW(mhsa_forward(x, bc.model.blocks[0], bc.cfg, none, ExecMode::kInferSliced), Error);
}

TEST(Mlp, FullMasksEqualStaticExactly) {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    auto bc = random_block_case(rng);
    const int n = static_cast<int>(rng.integer(1, 9));
    auto x = randn(rng, {n, bc.cfg.channels});
    const Mask groups(static_cast<std::size_t>(bc.cfg.heads), 1), tokens(static_cast<std::size_t>(n), 1);
    auto ref = mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, tokens, ExecMode::kStatic);
    EXPECT_TRUE(bit_equal(mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, tokens, ExecMode::kTrainMasked), ref));
    EXPECT_TRUE(bit_equal(mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, tokens, ExecMode::kInferSliced), ref));
  }
}

TEST(Mlp, AllTokensBypassedGivesZero) {
  Rng rng(15);
  auto bc = random_block_case(rng);
  auto x = randn(rng, {6, bc.cfg.channels});
  const Mask groups(static_cast<std::size_t>(bc.cfg.heads), 1), none(6, 0);
  for (auto mode : {ExecMode::kTrainMasked, ExecMode::kInferSliced}) {
    auto y = mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, none, mode);
    ASSERT_EQ(y.shape(), x.shape());
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Mlp, MaskedAndSlicedAgreeOnRandomMasks) {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    auto bc = random_block_case(rng);
    const int n = static_cast<int>(rng.integer(1, 9));
    auto x = randn(rng, {n, bc.cfg.channels});
    auto groups = random_mask(rng, bc.cfg.heads, 0.5, true);
    auto tokens = random_mask(rng, n, trial % 10 == 0 ? 0.0 : 0.6);
    auto masked = mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, tokens, ExecMode::kTrainMasked);
    auto sliced = mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, tokens, ExecMode::kInferSliced);
    if (std::count(tokens.begin(), tokens.end(), 1) == 0) {
      EXPECT_TRUE(bit_equal(sliced, masked));
    } else {
      EXPECT_LE(max_rel_err(sliced, masked), 1e-5) << "trial " << trial;
    }
  }
}

TEST(Mlp, BypassedRowsAreZeroAndResidualLeavesThemUnchanged) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    auto bc = random_block_case(rng);
    const int n = 7;
    auto x = randn(rng, {n, bc.cfg.channels});
    auto tokens = random_mask(rng, n, 0.5);
    auto groups = random_mask(rng, bc.cfg.heads, 0.5, true);
    auto gate = randn(rng, {1, bc.cfg.channels});
    for (auto mode : {ExecMode::kTrainMasked, ExecMode::kInferSliced}) {
      auto y = mlp_forward(x, bc.model.blocks[0], bc.cfg, groups, tokens, mode);
      auto out = add(x, mul(detail::per_token(gate, n), y));
      for (int r = 0; r < n; ++r) {
        if (tokens[static_cast<std::size_t>(r)]) continue;
        for (int c = 0; c < bc.cfg.channels; ++c) {
          const auto i = static_cast<std::size_t>(r * bc.cfg.channels + c);
          EXPECT_EQ(y[i], 0.0f);
          EXPECT_EQ(out[i], x[i]);
        }
      }
    }
  }
}

TEST(Mlp, EmptyGroupMaskRejectedButEmptyTokenMaskAllowed) {
  Rng rng(18);
  auto bc = random_block_case(rng);
  auto x = randn(rng, {3, bc.cfg.channels});
  const Mask none(static_cast<std::size_t>(bc.cfg.heads), 0), all(static_cast<std::size_t>(bc.cfg.heads), 1);
  EXPECT_THROW(mlp_forward(x, bc.model.blocks[0], bc.cfg, none, Mask{1, 1, 1}, ExecMode::kInferSliced), Error);
  EXPECT_THROW(mlp_forward(x, bc.model.blocks[0], bc.cfg, none, Mask{1, 1, 1}, ExecMode::kTrainMasked), Error);
  EXPECT_NO_THROW(mlp_forward(x, bc.model.blocks[0], bc.cfg, all, Mask{0, 0, 0}, ExecMode::kInferSliced));
  EXPECT_THROW(mlp_forward(x, bc.model.blocks[0], bc.cfg, all, Mask{1, 1}, ExecMode::kInferSliced), Error);
}

TEST(DitForward, ZeroInitPredictsZeroUnderAnyMasks) {
  const auto cfg = toy_config();
  auto model = init_model<float>(cfg, toy_diffusion(), 19);
  Rng rng(20);
  auto x = random_images(rng, cfg, 3);
  const auto ts = random_timesteps(rng, 3, 100);
  const auto ys = random_labels(rng, 3, cfg.classes);
  std::vector<Mask> heads, groups, tokens;
  for (int l = 0; l < cfg.layers; ++l) {
    heads.push_back(random_mask(rng, cfg.heads, 0.5, true));
    groups.push_back(random_mask(rng, cfg.heads, 0.5, true));
    tokens.push_back(random_mask(rng, 3 * cfg.tokens(), 0.5));
  }
  FixedRouting<float> fixed(heads, groups, tokens);
  for (auto mode : {ExecMode::kTrainMasked, ExecMode::kInferSliced, ExecMode::kStatic}) {
    auto out = predict_eps(model, x, ts, ys, fixed, mode);
    EXPECT_EQ(out.shape(), x.shape());
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(DitForward, FullDecisionsMatchStaticBitForBit) {
  const auto cfg = toy_config();
  auto model = random_model<float>(cfg, 21);
  Rng rng(22);
  auto x = random_images(rng, cfg, 4);
  const auto ts = random_timesteps(rng, 4, 100);
  const auto ys = random_labels(rng, 4, cfg.classes);
  FullRouting<float> full(cfg);
  auto ref = dit_forward(model, x, ts, ys, full, ExecMode::kStatic).out;
  EXPECT_TRUE(bit_equal(dit_forward(model, x, ts, ys, full, ExecMode::kTrainMasked).out, ref));
  EXPECT_TRUE(bit_equal(dit_forward(model, x, ts, ys, full, ExecMode::kInferSliced).out, ref));
  // Untrained routers (bias +2, zero weights) select everything in eval mode.
  LearnedRouting<float> learned(model, RouteMode::kEval);
  EXPECT_TRUE(bit_equal(dit_forward(model, x, ts, ys, learned, ExecMode::kInferSliced).out, ref));
}

TEST(DitForward, Deterministic) {
  const auto cfg = toy_config();
  auto model = random_model<float>(cfg, 23);
  Rng rng(24);
  auto x = random_images(rng, cfg, 2);
  const std::vector<int> ts{5, 90}, ys{1, 2};
  FullRouting<float> full(cfg);
  EXPECT_TRUE(bit_equal(dit_forward(model, x, ts, ys, full, ExecMode::kStatic).out,
                        dit_forward(model, x, ts, ys, full, ExecMode::kStatic).out));
}

TEST(DitForward, MaskedAndSlicedAgreeEndToEnd) {
  Rng rng(25);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cfg = tiny_config(2, 16, static_cast<int>(rng.integer(1, 4)) == 3 ? 4 : 2);
    auto model = random_model<float>(cfg, 200 + trial);
    const int b = 3;
    auto x = random_images(rng, cfg, b);
    const auto ts = random_timesteps(rng, b, 100);
    const auto ys = random_labels(rng, b, cfg.classes);
    std::vector<Mask> heads, groups, tokens;
    for (int l = 0; l < cfg.layers; ++l) {
      heads.push_back(random_mask(rng, cfg.heads, 0.5, true));
      groups.push_back(random_mask(rng, cfg.heads, 0.5, true));
      tokens.push_back(random_mask(rng, b * cfg.tokens(), 0.5));
    }
    FixedRouting<float> fixed(heads, groups, tokens);
    auto masked = dit_forward(model, x, ts, ys, fixed, ExecMode::kTrainMasked).out;
    auto sliced = dit_forward(model, x, ts, ys, fixed, ExecMode::kInferSliced).out;
    EXPECT_LE(max_rel_err(sliced, masked), 1e-5);
  }
}

TEST(DitForward, BatchSizeMismatchRejected) {
  const auto cfg = tiny_config();
  auto model = random_model<float>(cfg, 26);
  Rng rng(27);
  auto x = random_images(rng, cfg, 2);
  FullRouting<float> full(cfg);
  EXPECT_THROW(dit_forward(model, x, std::vector<int>{1}, std::vector<int>{0, 1}, full, ExecMode::kStatic), Error);
}

TEST(Gradients, EveryBlockWeightOfOneLayerModel) {
  const auto cfg = tiny_config(1, 16, 2);
  auto model = random_model<double>(cfg, 28);
  Rng rng(29);
  auto x = random_images<double>(rng, cfg, 2);
  auto eps = random_images<double>(rng, cfg, 2);
  const std::vector<int> ts{7, 55}, ys{2, cfg.null_label()};
  const std::vector<Mask> heads{{1, 0}}, groups{{0, 1}}, tokens{{1, 0, 1, 1, 0, 1, 1, 0}};
  auto& block = model.blocks[0];
  for (auto mode : {ExecMode::kStatic, ExecMode::kTrainMasked}) {
    auto loss_with = [&](BasicTensor<double>& slot) {
      return [&, mode](const BasicTensor<double>& p) {
        auto saved = slot;
        slot = p;
        FixedRouting<double> fixed(heads, groups, tokens);
        auto out = dit_forward(model, x, ts, ys, fixed, mode).out;
        slot = saved;
        return diffusion_loss(out, patchify_data(eps, cfg));
      };
    };
    for (auto* slot : {&block.w_q, &block.w_k, &block.w_v, &block.w_o, &block.w_1, &block.w_2, &block.ada_w,
                       &block.ada_b}) {
      auto point = slot->clone();
      EXPECT_LE(finite_difference_check<double>(loss_with(*slot), point, 1e-5), 1e-3);
    }
  }
}
