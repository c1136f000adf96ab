#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include "dydit/model.hpp"
#include "dydit/primitives.hpp"
#include "dydit/routing.hpp"
#include "dydit/slicing.hpp"

namespace dydit {

/// kTrainMasked computes every head, group and token and multiplies by the
/// masks; kInferSliced computes only active heads/groups on gathered tokens;
/// kStatic is the plain DiT with no routing at all.
enum class ExecMode { kTrainMasked, kInferSliced, kStatic };

/// Supplies per-layer decisions during a forward pass.
template <typename T>
class RoutingPolicy {
 public:
  virtual ~RoutingPolicy() = default;
  virtual WidthDecision<T> width(int layer, const BasicTensor<T>& e_t) = 0;
  virtual TokenDecision<T> tokens(int layer, const BasicTensor<T>& x, int batch) = 0;
  // Pre-sliced weights for the current width decision, if the policy has them.
  virtual const SlicedBlock<T>* sliced(int /*layer*/) const { return nullptr; }
};

template <typename T>
class FullRouting : public RoutingPolicy<T> {
 public:
  explicit FullRouting(const ModelConfig& cfg) : cfg_(cfg) {}
  WidthDecision<T> width(int, const BasicTensor<T>& e_t) override {
    return full_width<T>(static_cast<int>(e_t.dim(0)), cfg_.heads);
  }
  TokenDecision<T> tokens(int, const BasicTensor<T>& x, int batch) override {
    return full_tokens<T>(batch, static_cast<int>(x.dim(0)) / batch);
  }

 private:
  ModelConfig cfg_;
};

/// Decisions from the model's own routers.
template <typename T>
class LearnedRouting : public RoutingPolicy<T> {
 public:
  LearnedRouting(const DitModel<T>& model, RouteMode mode, double temperature = 1.0, Rng* rng = nullptr)
      : model_(model), mode_(mode), temperature_(temperature), rng_(rng) {}
  WidthDecision<T> width(int layer, const BasicTensor<T>& e_t) override {
    const auto l = static_cast<std::size_t>(layer);
    return route_width(e_t, model_.routers[l], model_.protection[l], mode_, temperature_, rng_);
  }
  TokenDecision<T> tokens(int layer, const BasicTensor<T>& x, int batch) override {
    return route_tokens(x, model_.routers[static_cast<std::size_t>(layer)], mode_, temperature_, rng_, batch);
  }

 private:
  const DitModel<T>& model_;
  RouteMode mode_;
  double temperature_;
  Rng* rng_;
};

/// Explicit masks: one (head, channel) pair per layer shared by the batch and
/// optionally one B*N token mask per layer (all tokens active otherwise).
template <typename T>
class FixedRouting : public RoutingPolicy<T> {
 public:
  using Mask = std::vector<std::uint8_t>;
  FixedRouting(std::vector<Mask> head, std::vector<Mask> channel, std::vector<Mask> tokens = {})
      : head_(std::move(head)), channel_(std::move(channel)), tokens_(std::move(tokens)) {}
  WidthDecision<T> width(int layer, const BasicTensor<T>& e_t) override {
    const auto l = static_cast<std::size_t>(layer);
    return fixed_width<T>(static_cast<int>(e_t.dim(0)), head_.at(l), channel_.at(l));
  }
  TokenDecision<T> tokens(int layer, const BasicTensor<T>& x, int batch) override {
    const int n = static_cast<int>(x.dim(0)) / batch;
    if (tokens_.empty()) return full_tokens<T>(batch, n);
    return fixed_tokens<T>(batch, n, tokens_.at(static_cast<std::size_t>(layer)));
  }

 private:
  std::vector<Mask> head_, channel_, tokens_;
};

template <typename T>
struct LayerRecord {
  WidthDecision<T> width;
  TokenDecision<T> tokens;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> out;  // B*N x P token-layout noise prediction
  std::vector<LayerRecord<T>> layers;
  int batch = 0;
};

template <typename T>
struct BlockModulation {
  BasicTensor<T> shift_attn, scale_attn, gate_attn;  // beta, gamma, alpha
  BasicTensor<T> shift_mlp, scale_mlp, gate_mlp;      // beta', gamma', alpha'
};

// --- tokenization ------------------------------------------------------------

/// (B, cin, E, E) images -> (B*N, p*p*cin) patch rows; patch vectors are
/// ordered (row, col, channel).
template <typename T>
BasicTensor<T> patchify_data(const BasicTensor<T>& images, const ModelConfig& cfg) {
  require(cfg.extent % cfg.patch == 0, "patchify: extent ", cfg.extent, " not divisible by patch ", cfg.patch);
  require(images.rank() == 4 && images.dim(1) == cfg.channels_in && images.dim(2) == cfg.extent &&
              images.dim(3) == cfg.extent,
          "patchify: image shape ", shape_str(images.shape()), " does not match [B,", cfg.channels_in, ",",
          cfg.extent, ",", cfg.extent, "]");
  const std::int64_t b = images.dim(0);
  const int p = cfg.patch;
  const int grid = cfg.grid();
  const int e = cfg.extent;
  const int cin = cfg.channels_in;
  BasicTensor<T> out(Shape{b * cfg.tokens(), cfg.patch_dim()});
  auto o = out.mutable_data();
  auto src = images.data();
  std::size_t at = 0;
  for (std::int64_t s = 0; s < b; ++s)
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int c = 0; c < cin; ++c)
              o[at++] = src[static_cast<std::size_t>(((s * cin + c) * e + gy * p + py) * e + gx * p + px)];
  return out;
}

template <typename T>
BasicTensor<T> unpatchify_data(const BasicTensor<T>& rows, const ModelConfig& cfg) {
  require(rows.rank() == 2 && rows.dim(1) == cfg.patch_dim() && rows.dim(0) % cfg.tokens() == 0,
          "unpatchify: shape ", shape_str(rows.shape()), " is not [B*", cfg.tokens(), ",", cfg.patch_dim(), "]");
  const std::int64_t b = rows.dim(0) / cfg.tokens();
  const int p = cfg.patch;
  const int grid = cfg.grid();
  const int e = cfg.extent;
  const int cin = cfg.channels_in;
  BasicTensor<T> out(Shape{b, cin, e, e});
  auto o = out.mutable_data();
  auto src = rows.data();
  std::size_t at = 0;
  for (std::int64_t s = 0; s < b; ++s)
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int c = 0; c < cin; ++c)
              o[static_cast<std::size_t>(((s * cin + c) * e + gy * p + py) * e + gx * p + px)] = src[at++];
  return out;
}

/// Patch rows projected to C channels plus the positional table.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& images, const ModelConfig& cfg, const BasicTensor<T>& proj_w,
                        const BasicTensor<T>& proj_b, const BasicTensor<T>& pos) {
  const auto rows = patchify_data(images, cfg);
  const std::int64_t b = images.dim(0);
  auto x = detail::linear(rows, proj_w, proj_b);
  auto tiled = reshape(broadcast(reshape(pos, {1, cfg.tokens(), cfg.channels}), {b, cfg.tokens(), cfg.channels}),
                       {b * cfg.tokens(), cfg.channels});
  return add(x, tiled);
}

// --- conditioning ------------------------------------------------------------

/// Raw sinusoidal features [cos(t f_i) | sin(t f_i)], B x freq_dim.
template <typename T>
BasicTensor<T> timestep_features(std::span<const int> ts, int freq_dim) {
  const int half = freq_dim / 2;
  BasicTensor<T> out(Shape{static_cast<std::int64_t>(ts.size()), freq_dim});
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < ts.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = ts[b] * freq;
      o[b * static_cast<std::size_t>(freq_dim) + static_cast<std::size_t>(i)] = static_cast<T>(std::cos(arg));
      o[b * static_cast<std::size_t>(freq_dim) + static_cast<std::size_t>(half + i)] = static_cast<T>(std::sin(arg));
    }
  return out;
}

template <typename T>
BasicTensor<T> timestep_embed(const DitModel<T>& model, std::span<const int> ts) {
  for (int t : ts)
    require(t >= 0 && t <= model.diffusion.T, "timestep_embed: t = ", t, " outside [0, ", model.diffusion.T, "]");
  auto f = timestep_features<T>(ts, model.config.freq_dim);
  return detail::linear(gelu(detail::linear(f, model.t_w1, model.t_b1)), model.t_w2, model.t_b2);
}

template <typename T>
BasicTensor<T> class_embed(const DitModel<T>& model, std::span<const int> ys) {
  const int rows = model.config.classes + 1;
  BasicTensor<T> onehot(Shape{static_cast<std::int64_t>(ys.size()), rows});
  auto o = onehot.mutable_data();
  for (std::size_t b = 0; b < ys.size(); ++b) {
    require(ys[b] >= 0 && ys[b] <= model.config.classes, "class_embed: label ", ys[b], " outside [0, ",
            model.config.classes, "] (", model.config.classes, " is the null label)");
    o[b * static_cast<std::size_t>(rows) + static_cast<std::size_t>(ys[b])] = T(1);
  }
  return matmul(onehot, model.class_table);
}

template <typename T>
BlockModulation<T> adaln_modulate(const BasicTensor<T>& e_t, const BasicTensor<T>& e_cls, const BlockWeights<T>& block) {
  require(e_t.shape() == e_cls.shape(), "adaln_modulate: shape mismatch ", shape_str(e_t.shape()), " vs ",
          shape_str(e_cls.shape()));
  const std::int64_t c = e_t.dim(1);
  auto mod = detail::linear(add(e_t, e_cls), block.ada_w, block.ada_b);
  auto part = [&](int i) { return slice(mod, 1, i * c, (i + 1) * c); };
  return {part(0), part(1), part(2), part(3), part(4), part(5)};
}

namespace detail {

// (B, C) per-sample vector -> (B*N, C) rows.
template <typename T>
BasicTensor<T> per_token(const BasicTensor<T>& v, std::int64_t tokens) {
  const std::int64_t b = v.dim(0);
  const std::int64_t c = v.dim(1);
  return reshape(broadcast(reshape(v, {b, 1, c}), {b, tokens, c}), {b * tokens, c});
}

// LN(x) * (1 + scale) + shift
template <typename T>
BasicTensor<T> modulate(const BasicTensor<T>& normed, const BasicTensor<T>& shift, const BasicTensor<T>& scale_v,
                        std::int64_t tokens) {
  return add(add(mul(normed, per_token(scale_v, tokens)), normed), per_token(shift, tokens));
}

}  // namespace detail

// --- blocks --------------------------------------------------------------------

/// Multi-head attention over B samples of N tokens with `heads` heads of
/// width head_dim. `head_gate` (B x heads) scales each head's output before
/// the output projection.
template <typename T>
BasicTensor<T> attention_heads(const BasicTensor<T>& h, const BasicTensor<T>& w_q, const BasicTensor<T>& w_k,
                               const BasicTensor<T>& w_v, const BasicTensor<T>& w_o, std::int64_t batch,
                               std::int64_t tokens, std::int64_t heads, std::int64_t head_dim,
                               const std::type_identity_t<BasicTensor<T>>* head_gate) {
  TraceRegion region("mhsa");
  auto split = [&](const BasicTensor<T>& x) {
    return reshape(transpose(reshape(x, {batch, tokens, heads, head_dim}), {0, 2, 1, 3}),
                   {batch * heads, tokens, head_dim});
  };
  auto q = split(matmul(h, w_q));
  auto k = split(matmul(h, w_k));
  auto v = split(matmul(h, w_v));
  auto attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim))));
  auto out = reshape(matmul(attn, v), {batch, heads, tokens, head_dim});
  if (head_gate) {
    out = mul(out, broadcast(reshape(*head_gate, {batch, heads, 1, 1}), {batch, heads, tokens, head_dim}));
  }
  auto merged = reshape(transpose(out, {0, 2, 1, 3}), {batch * tokens, heads * head_dim});
  return matmul(merged, w_o);
}

/// Grouped MLP over rows; `group_gate` (B x groups) scales each group's
/// hidden activations. Rows must be sample-major when a gate is given.
template <typename T>
BasicTensor<T> mlp_groups(const BasicTensor<T>& h, const BasicTensor<T>& w_1, const BasicTensor<T>& w_2,
                          std::int64_t batch, std::int64_t groups, std::int64_t group_dim,
                          const std::type_identity_t<BasicTensor<T>>* group_gate) {
  TraceRegion region("mlp");
  auto hidden = gelu(matmul(h, w_1));
  if (group_gate) {
    const std::int64_t rows = h.dim(0);
    const std::int64_t tokens = rows / batch;
    auto g = reshape(broadcast(reshape(*group_gate, {batch, 1, groups, 1}), {batch, tokens, groups, group_dim}),
                     {rows, groups * group_dim});
    hidden = mul(hidden, g);
  }
  return matmul(hidden, w_2);
}

namespace detail {

inline std::vector<std::uint8_t> shared_row(const std::vector<std::uint8_t>& mask, int batch, int heads,
                                            const char* what) {
  std::vector<std::uint8_t> row(mask.begin(), mask.begin() + heads);
  for (int b = 1; b < batch; ++b)
    require(std::equal(row.begin(), row.end(), mask.begin() + b * heads), "sliced execution needs one ", what,
            " mask for the whole batch");
  return row;
}

inline void require_nonempty(const std::vector<std::uint8_t>& mask, int batch, int heads, const char* what) {
  for (int b = 0; b < batch; ++b) {
    int n = 0;
    for (int h = 0; h < heads; ++h) n += mask[static_cast<std::size_t>(b * heads + h)];
    require(n >= 1, what, " mask has no active entry");
  }
}

}  // namespace detail

/// Attention branch for B*N rows under one width decision.
template <typename T>
BasicTensor<T> mhsa_block(const BasicTensor<T>& h, const BlockWeights<T>& block, const ModelConfig& cfg,
                          const WidthDecision<T>& width, ExecMode mode, const SlicedBlock<T>* pre_sliced = nullptr) {
  const std::int64_t batch = width.batch;
  const std::int64_t n = h.dim(0) / batch;
  if (mode == ExecMode::kStatic)
    return attention_heads(h, block.w_q, block.w_k, block.w_v, block.w_o, batch, n, cfg.heads, cfg.head_dim(), nullptr);
  detail::require_nonempty(width.head_mask, width.batch, cfg.heads, "head");
  if (mode == ExecMode::kTrainMasked) {
    return attention_heads(h, block.w_q, block.w_k, block.w_v, block.w_o, batch, n, cfg.heads, cfg.head_dim(),
                           &width.head_gate);
  }
  if (pre_sliced) {
    return attention_heads(h, pre_sliced->w_q, pre_sliced->w_k, pre_sliced->w_v, pre_sliced->w_o, batch, n,
                           pre_sliced->active_heads, cfg.head_dim(), nullptr);
  }
  auto heads = detail::shared_row(width.head_mask, width.batch, cfg.heads, "head");
  std::vector<std::uint8_t> all(static_cast<std::size_t>(cfg.heads), 1);
  auto s = slice_block(block, cfg, heads, all);
  return attention_heads(h, s.w_q, s.w_k, s.w_v, s.w_o, batch, n, s.active_heads, cfg.head_dim(), nullptr);
}

/// MLP branch for B*N rows. Rows whose token mask is 0 come back exactly zero.
template <typename T>
BasicTensor<T> mlp_block(const BasicTensor<T>& h, const BlockWeights<T>& block, const ModelConfig& cfg,
                         const WidthDecision<T>& width, const TokenDecision<T>& tokens, ExecMode mode,
                         const SlicedBlock<T>* pre_sliced = nullptr) {
  const std::int64_t batch = width.batch;
  if (mode == ExecMode::kStatic)
    return mlp_groups(h, block.w_1, block.w_2, batch, cfg.heads, cfg.group_dim(), nullptr);
  detail::require_nonempty(width.channel_mask, width.batch, cfg.heads, "channel");
  require(static_cast<std::int64_t>(tokens.mask.size()) == h.dim(0), "mlp: token mask of length ", tokens.mask.size(),
          " for ", h.dim(0), " rows");
  if (mode == ExecMode::kTrainMasked) {
    auto y = mlp_groups(h, block.w_1, block.w_2, batch, cfg.heads, cfg.group_dim(), &width.channel_gate);
    return mul(y, broadcast(tokens.gate, y.shape()));
  }
  BasicTensor<T> w_1, w_2;
  int groups = 0;
  if (pre_sliced) {
    w_1 = pre_sliced->w_1;
    w_2 = pre_sliced->w_2;
    groups = pre_sliced->active_groups;
  } else {
    auto channel = detail::shared_row(width.channel_mask, width.batch, cfg.heads, "channel");
    std::vector<std::uint8_t> all(static_cast<std::size_t>(cfg.heads), 1);
    auto s = slice_block(block, cfg, all, channel);
    w_1 = s.w_1;
    w_2 = s.w_2;
    groups = s.active_groups;
  }
  BasicTensor<T> zeros(Shape{h.dim(0), h.dim(1)});
  auto rows = gather_rows(h, tokens.mask);
  if (rows.dim(0) == 0) return zeros;
  auto y = mlp_groups(rows, w_1, w_2, 1, groups, cfg.group_dim(), nullptr);
  return scatter_rows(y, tokens.mask, zeros);
}

/// Single-sample attention branch on X (N x C) under a head mask.
template <typename T>
BasicTensor<T> mhsa_forward(const BasicTensor<T>& x, const BlockWeights<T>& block, const ModelConfig& cfg,
                            const std::vector<std::uint8_t>& head_mask, ExecMode mode) {
  std::vector<std::uint8_t> all(static_cast<std::size_t>(cfg.heads), 1);
  return mhsa_block(x, block, cfg, fixed_width<T>(1, head_mask, all), mode);
}

/// Single-sample MLP branch on X (N x C) under group and token masks.
template <typename T>
BasicTensor<T> mlp_forward(const BasicTensor<T>& x, const BlockWeights<T>& block, const ModelConfig& cfg,
                           const std::vector<std::uint8_t>& channel_mask, const std::vector<std::uint8_t>& token_mask,
                           ExecMode mode) {
  std::vector<std::uint8_t> all(static_cast<std::size_t>(cfg.heads), 1);
  return mlp_block(x, block, cfg, fixed_width<T>(1, all, channel_mask),
                   fixed_tokens<T>(1, static_cast<int>(x.dim(0)), token_mask), mode);
}

// --- full model ----------------------------------------------------------------

/// Noise prediction in token layout for a batch of noisy images.
template <typename T>
ForwardResult<T> dit_forward(const DitModel<T>& model, const BasicTensor<T>& x_t, std::span<const int> ts,
                             std::span<const int> ys, RoutingPolicy<T>& routing, ExecMode mode) {
  const auto& cfg = model.config;
  const int batch = static_cast<int>(x_t.dim(0));
  require(static_cast<int>(ts.size()) == batch && static_cast<int>(ys.size()) == batch, "dit_forward: ", ts.size(),
          " timesteps and ", ys.size(), " labels for a batch of ", batch);
  const std::int64_t n = cfg.tokens();

  ForwardResult<T> result;
  result.batch = batch;
  auto x = patchify(x_t, cfg, model.patch_w, model.patch_b, model.pos);
  auto e_t = timestep_embed(model, ts);
  auto e_cls = class_embed(model, ys);

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& block = model.blocks[static_cast<std::size_t>(l)];
    auto mod = adaln_modulate(e_t, e_cls, block);
    LayerRecord<T> rec;
    rec.width = mode == ExecMode::kStatic ? full_width<T>(batch, cfg.heads) : routing.width(l, e_t);

    auto h = detail::modulate(layer_norm(x), mod.shift_attn, mod.scale_attn, n);
    auto attn = mhsa_block(h, block, cfg, rec.width, mode, routing.sliced(l));
    x = add(x, mul(detail::per_token(mod.gate_attn, n), attn));

    auto h2 = detail::modulate(layer_norm(x), mod.shift_mlp, mod.scale_mlp, n);
    rec.tokens = mode == ExecMode::kStatic ? full_tokens<T>(batch, static_cast<int>(n)) : routing.tokens(l, h2, batch);
    auto mlp = mlp_block(h2, block, cfg, rec.width, rec.tokens, mode, routing.sliced(l));
    x = add(x, mul(detail::per_token(mod.gate_mlp, n), mlp));
    result.layers.push_back(std::move(rec));
  }
  result.out = detail::linear(layer_norm(x), model.final_w, model.final_b);
  return result;
}

/// Noise prediction in image layout.
template <typename T>
BasicTensor<T> predict_eps(const DitModel<T>& model, const BasicTensor<T>& x_t, std::span<const int> ts,
                           std::span<const int> ys, RoutingPolicy<T>& routing, ExecMode mode) {
  return unpatchify_data(dit_forward(model, x_t, ts, ys, routing, mode).out, model.config);
}

}  // namespace dydit
