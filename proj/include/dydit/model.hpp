#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dydit/diffusion.hpp"
#include "dydit/error.hpp"
#include "dydit/rng.hpp"
#include "dydit/tensor.hpp"

namespace dydit {

struct ModelConfig {
  int layers = 2;
  int channels = 64;
  int heads = 4;
  int patch = 4;
  int extent = 16;
  int channels_in = 3;
  int classes = 4;
  int freq_dim = 64;  // sinusoidal timestep features fed to the embedding MLP

  int head_dim() const { return channels / heads; }
  int mlp_hidden() const { return 4 * channels; }
  int group_dim() const { return mlp_hidden() / heads; }
  int grid() const { return extent / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch * channels_in; }
  int null_label() const { return classes; }

  void validate() const {
    require(layers >= 1, "model.layers must be >= 1");
    require(channels >= 1 && heads >= 1, "model.channels and model.heads must be >= 1");
    require(channels % heads == 0, "model.channels (", channels, ") must be divisible by model.heads (", heads, ")");
    require(mlp_hidden() % heads == 0, "mlp hidden width must be divisible by model.heads");
    require(patch >= 1 && extent >= 1, "model.patch and model.extent must be >= 1");
    require(extent % patch == 0, "model.extent (", extent, ") must be divisible by model.patch (", patch, ")");
    require(channels_in >= 1 && classes >= 1, "model.channels_in and model.classes must be >= 1");
    require(freq_dim >= 2 && freq_dim % 2 == 0, "model.freq_dim must be even and >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Per-head / per-group factored layout: w_q is C x (H*C_H) in memory, i.e.
// C x H x C_H row-major; w_o is (H*C_H) x C, i.e. H x C_H x C.
template <typename T>
struct BlockWeights {
  BasicTensor<T> w_q, w_k, w_v, w_o;
  BasicTensor<T> w_1, w_2;
  BasicTensor<T> ada_w, ada_b;  // C x 6C projection to the six modulation vectors
};

template <typename T>
struct RouterParams {
  BasicTensor<T> head_w, head_b;        // C x H, H
  BasicTensor<T> channel_w, channel_b;  // C x H, H
  BasicTensor<T> token_w, token_b;      // C x 1, 1
};

/// Magnitude ranking of one layer. The top head and group are always kept.
struct ProtectionIndex {
  int head = 0;
  int group = 0;
  std::vector<int> head_rank;
  std::vector<int> group_rank;

  bool operator==(const ProtectionIndex&) const = default;
};

template <typename T>
struct DitModel {
  ModelConfig config;
  DiffusionConfig diffusion;
  bool dynamic = false;  // routers active (fine-tuned)

  BasicTensor<T> patch_w, patch_b;  // P x C, C
  BasicTensor<T> pos;               // N x C, fixed sinusoidal
  BasicTensor<T> t_w1, t_b1, t_w2, t_b2;
  BasicTensor<T> class_table;  // (K + 1) x C; last row is the null label
  std::vector<BlockWeights<T>> blocks;
  std::vector<RouterParams<T>> routers;
  std::vector<ProtectionIndex> protection;
  BasicTensor<T> final_w, final_b;  // C x P, P

  /// Trainable tensors with their checkpoint names. Handles share storage
  /// with the model.
  std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out = {
        {"patch.weight", patch_w},       {"patch.bias", patch_b},       {"t_embed.fc1.weight", t_w1},
        {"t_embed.fc1.bias", t_b1},      {"t_embed.fc2.weight", t_w2},  {"t_embed.fc2.bias", t_b2},
        {"class_embed.table", class_table},
    };
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      const auto& b = blocks[i];
      out.insert(out.end(), {{p + "attn.q", b.w_q},
                             {p + "attn.k", b.w_k},
                             {p + "attn.v", b.w_v},
                             {p + "attn.o", b.w_o},
                             {p + "mlp.fc1", b.w_1},
                             {p + "mlp.fc2", b.w_2},
                             {p + "adaln.weight", b.ada_w},
                             {p + "adaln.bias", b.ada_b}});
      const auto& r = routers[i];
      out.insert(out.end(), {{p + "router.head.weight", r.head_w},
                             {p + "router.head.bias", r.head_b},
                             {p + "router.channel.weight", r.channel_w},
                             {p + "router.channel.bias", r.channel_b},
                             {p + "router.token.weight", r.token_w},
                             {p + "router.token.bias", r.token_b}});
    }
    out.insert(out.end(), {{"final.weight", final_w}, {"final.bias", final_b}});
    return out;
  }

  void set_requires_grad(bool value) {
    for (auto& [name, t] : named_parameters()) {
      auto handle = t;
      handle.set_requires_grad(value);
    }
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) {
      auto handle = t;
      handle.zero_grad();
    }
  }

  /// Deep copy: no storage shared with *this.
  DitModel clone() const {
    DitModel m = *this;
    auto copy = [](BasicTensor<T>& t) {
      const bool rg = t.requires_grad();
      t = t.clone();
      t.set_requires_grad(rg);
    };
    for (auto* t : {&m.patch_w, &m.patch_b, &m.pos, &m.t_w1, &m.t_b1, &m.t_w2, &m.t_b2, &m.class_table, &m.final_w,
                    &m.final_b})
      copy(*t);
    for (auto& b : m.blocks)
      for (auto* t : {&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_1, &b.w_2, &b.ada_w, &b.ada_b}) copy(*t);
    for (auto& r : m.routers)
      for (auto* t : {&r.head_w, &r.head_b, &r.channel_w, &r.channel_b, &r.token_w, &r.token_b}) copy(*t);
    return m;
  }
};

/// Fixed 2-D sin-cos positional table, N x C (half the channels encode the
/// row, half the column).
template <typename T>
BasicTensor<T> positional_table(const ModelConfig& cfg) {
  const int grid = cfg.grid();
  const int c = cfg.channels;
  BasicTensor<T> pos(Shape{cfg.tokens(), c});
  auto p = pos.mutable_data();
  const int half = c / 2;
  const int quarter = half / 2;
  auto encode = [&](int token, int offset, int width, double coord) {
    const int q = width / 2;
    for (int i = 0; i < q; ++i) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / std::max(q, 1));
      p[static_cast<std::size_t>(token * c + offset + i)] = static_cast<T>(std::sin(coord * omega));
      p[static_cast<std::size_t>(token * c + offset + q + i)] = static_cast<T>(std::cos(coord * omega));
    }
  };
  for (int r = 0; r < grid; ++r)
    for (int col = 0; col < grid; ++col) {
      const int token = r * grid + col;
      if (quarter > 0) {
        encode(token, 0, half, r);
        encode(token, half, c - half, col);
      }
    }
  return pos;
}

namespace detail {

template <typename T>
BasicTensor<T> xavier(Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
  BasicTensor<T> w(Shape{fan_in, fan_out});
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.mutable_data()) v = static_cast<T>((2 * rng.uniform() - 1) * a);
  return w;
}

template <typename T>
BasicTensor<T> normal(Rng& rng, Shape shape, double stddev) {
  BasicTensor<T> w(std::move(shape));
  for (auto& v : w.mutable_data()) v = static_cast<T>(rng.normal() * stddev);
  return w;
}

}  // namespace detail

inline constexpr double kRouterBiasInit = 2.0;

/// DiT-style initialization: xavier projections, adaLN and the output head
/// zeroed so every block starts as the identity and the prediction as zero.
/// Routers start with zero weights and bias +2.
template <typename T>
DitModel<T> init_model(const ModelConfig& cfg, const DiffusionConfig& diffusion, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x1417));
  DitModel<T> m;
  m.config = cfg;
  m.diffusion = diffusion;
  const std::int64_t c = cfg.channels;
  const std::int64_t h = cfg.heads;
  m.patch_w = detail::xavier<T>(rng, cfg.patch_dim(), c);
  m.patch_b = BasicTensor<T>(Shape{c});
  m.pos = positional_table<T>(cfg);
  m.t_w1 = detail::normal<T>(rng, {cfg.freq_dim, c}, 0.02);
  m.t_b1 = BasicTensor<T>(Shape{c});
  m.t_w2 = detail::normal<T>(rng, {c, c}, 0.02);
  m.t_b2 = BasicTensor<T>(Shape{c});
  m.class_table = detail::normal<T>(rng, {cfg.classes + 1, c}, 0.02);
  for (int l = 0; l < cfg.layers; ++l) {
    BlockWeights<T> b;
    b.w_q = detail::xavier<T>(rng, c, c);
    b.w_k = detail::xavier<T>(rng, c, c);
    b.w_v = detail::xavier<T>(rng, c, c);
    b.w_o = detail::xavier<T>(rng, c, c);
    b.w_1 = detail::xavier<T>(rng, c, cfg.mlp_hidden());
    b.w_2 = detail::xavier<T>(rng, cfg.mlp_hidden(), c);
    b.ada_w = BasicTensor<T>(Shape{c, 6 * c});
    b.ada_b = BasicTensor<T>(Shape{6 * c});
    m.blocks.push_back(std::move(b));

    RouterParams<T> r;
    r.head_w = BasicTensor<T>(Shape{c, h});
    r.head_b = BasicTensor<T>(Shape{h}, static_cast<T>(kRouterBiasInit));
    r.channel_w = BasicTensor<T>(Shape{c, h});
    r.channel_b = BasicTensor<T>(Shape{h}, static_cast<T>(kRouterBiasInit));
    r.token_w = BasicTensor<T>(Shape{c, 1});
    r.token_b = BasicTensor<T>(Shape{1}, static_cast<T>(kRouterBiasInit));
    m.routers.push_back(std::move(r));
  }
  m.final_w = BasicTensor<T>(Shape{c, cfg.patch_dim()});
  m.final_b = BasicTensor<T>(Shape{cfg.patch_dim()});
  m.protection.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& p : m.protection) {
    for (int i = 0; i < cfg.heads; ++i) {
      p.head_rank.push_back(i);
      p.group_rank.push_back(i);
    }
  }
  m.set_requires_grad(true);
  return m;
}

}  // namespace dydit
