#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "dydit/model.hpp"
#include "dydit/primitives.hpp"
#include "dydit/rng.hpp"

namespace dydit {

enum class RouteMode { kTrain, kEval };

inline constexpr double kRouteThreshold = 0.5;

/// Width decisions for a batch of B samples; masks are B x H row-major.
template <typename T>
struct WidthDecision {
  BasicTensor<T> head_scores, channel_scores;  // B x H, in [0, 1]
  std::vector<std::uint8_t> head_mask, channel_mask;
  // Differentiable gates whose forward value equals the hard mask.
  BasicTensor<T> head_gate, channel_gate;  // B x H
  int batch = 0;
  int heads = 0;

  int active_heads(int b) const { return count(head_mask, b); }
  int active_groups(int b) const { return count(channel_mask, b); }
  std::vector<std::uint8_t> head_row(int b) const { return row(head_mask, b); }
  std::vector<std::uint8_t> channel_row(int b) const { return row(channel_mask, b); }

 private:
  int count(const std::vector<std::uint8_t>& m, int b) const {
    return std::accumulate(m.begin() + b * heads, m.begin() + (b + 1) * heads, 0);
  }
  std::vector<std::uint8_t> row(const std::vector<std::uint8_t>& m, int b) const {
    return {m.begin() + b * heads, m.begin() + (b + 1) * heads};
  }
};

/// Token decisions over B*N rows (sample-major).
template <typename T>
struct TokenDecision {
  BasicTensor<T> scores;            // B*N
  std::vector<std::uint8_t> mask;   // B*N
  BasicTensor<T> gate;              // B*N x 1
  int batch = 0;
  int tokens = 0;

  int active_tokens(int b) const {
    return std::accumulate(mask.begin() + b * tokens, mask.begin() + (b + 1) * tokens, 0);
  }
};

template <typename T>
std::vector<std::uint8_t> threshold_mask(std::span<const T> scores) {
  std::vector<std::uint8_t> m(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) m[i] = scores[i] >= static_cast<T>(kRouteThreshold) ? 1 : 0;
  return m;
}

/// sigmoid((logits + g1 - g2) / temperature) with caller-supplied Gumbel draws.
template <typename T>
BasicTensor<T> gumbel_sigmoid(const BasicTensor<T>& logits, double temperature, const BasicTensor<T>& g1,
                              const BasicTensor<T>& g2) {
  require(temperature > 0, "gumbel_sigmoid: temperature must be positive, got ", temperature);
  BasicTensor<T> noise(logits.shape());
  auto n = noise.mutable_data();
  for (std::size_t i = 0; i < n.size(); ++i) n[i] = g1[i] - g2[i];
  return sigmoid(scale(add(logits, noise), 1.0 / temperature));
}

template <typename T>
BasicTensor<T> gumbel_sigmoid(const BasicTensor<T>& logits, double temperature, Rng& rng) {
  require(temperature > 0, "gumbel_sigmoid: temperature must be positive, got ", temperature);
  BasicTensor<T> g1(logits.shape());
  BasicTensor<T> g2(logits.shape());
  auto a = g1.mutable_data();
  auto b = g2.mutable_data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<T>(rng.gumbel());
    b[i] = static_cast<T>(rng.gumbel());
  }
  return gumbel_sigmoid(logits, temperature, g1, g2);
}

/// Forward value is exactly `hard`; the gradient flows as if it were `soft`.
template <typename T>
BasicTensor<T> straight_through(const BasicTensor<T>& hard, const BasicTensor<T>& soft) {
  require(hard.shape() == soft.shape(), "straight_through: shape mismatch ", shape_str(hard.shape()), " vs ",
          shape_str(soft.shape()));
  return add(hard.detach(), sub(soft, soft.detach()));
}

template <typename T>
BasicTensor<T> mask_tensor(const std::vector<std::uint8_t>& mask, Shape shape) {
  BasicTensor<T> t(std::move(shape));
  auto d = t.mutable_data();
  require(d.size() == mask.size(), "mask of length ", mask.size(), " for shape ", shape_str(t.shape()));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = mask[i] ? T(1) : T(0);
  return t;
}

namespace detail {

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  auto y = matmul(x, w);
  return add(y, broadcast(b, y.shape()));
}

template <typename T>
struct GateResult {
  BasicTensor<T> scores;
  std::vector<std::uint8_t> mask;
  BasicTensor<T> gate;
};

// Scores, thresholded mask, and differentiable gate for a logits tensor.
// `protect` (one index per row, or empty) forces that column active.
template <typename T>
GateResult<T> gate_from_logits(const BasicTensor<T>& logits, RouteMode mode, double temperature, Rng* rng,
                               const std::vector<int>& protect) {
  GateResult<T> r;
  if (mode == RouteMode::kTrain) {
    require(rng != nullptr, "train-mode routing needs a random stream");
    r.scores = gumbel_sigmoid(logits, temperature, *rng);
  } else {
    require(temperature > 0, "routing temperature must be positive");
    r.scores = sigmoid(logits);
  }
  r.mask = threshold_mask<T>(r.scores.data());
  if (!protect.empty()) {
    const std::int64_t cols = logits.dim(-1);
    for (std::size_t row = 0; row < protect.size(); ++row)
      r.mask[row * static_cast<std::size_t>(cols) + static_cast<std::size_t>(protect[row])] = 1;
  }
  auto hard = mask_tensor<T>(r.mask, logits.shape());
  r.gate = mode == RouteMode::kTrain ? straight_through(hard, r.scores) : hard;
  return r;
}

}  // namespace detail

/// Timestep-conditioned head / channel-group routing for a batch of
/// embeddings (B x C). Inputs are detached: router losses only reach router
/// parameters.
template <typename T>
WidthDecision<T> route_width(const BasicTensor<T>& e_t, const RouterParams<T>& params,
                             const ProtectionIndex& protection, RouteMode mode, double temperature, Rng* rng) {
  require(e_t.rank() == 2 && e_t.dim(1) == params.head_w.dim(0), "route_width: shape mismatch ",
          shape_str(e_t.shape()), " vs ", shape_str(params.head_w.shape()));
  const auto input = e_t.detach();
  const int batch = static_cast<int>(e_t.dim(0));
  const std::vector<int> head_protect(static_cast<std::size_t>(batch), protection.head);
  const std::vector<int> group_protect(static_cast<std::size_t>(batch), protection.group);
  auto heads = detail::gate_from_logits(detail::linear(input, params.head_w, params.head_b), mode, temperature, rng,
                                        head_protect);
  auto groups = detail::gate_from_logits(detail::linear(input, params.channel_w, params.channel_b), mode, temperature,
                                         rng, group_protect);
  WidthDecision<T> d;
  d.batch = batch;
  d.heads = static_cast<int>(params.head_w.dim(1));
  d.head_scores = heads.scores;
  d.channel_scores = groups.scores;
  d.head_mask = std::move(heads.mask);
  d.channel_mask = std::move(groups.mask);
  d.head_gate = heads.gate;
  d.channel_gate = groups.gate;
  return d;
}

/// Per-token MLP routing over rows x (B*N x C). No protection: every token
/// may bypass.
template <typename T>
TokenDecision<T> route_tokens(const BasicTensor<T>& x, const RouterParams<T>& params, RouteMode mode,
                              double temperature, Rng* rng, int batch = 1) {
  require(x.rank() == 2 && x.dim(1) == params.token_w.dim(0), "route_tokens: shape mismatch ", shape_str(x.shape()),
          " vs ", shape_str(params.token_w.shape()));
  require(batch >= 1 && x.dim(0) % batch == 0, "route_tokens: ", x.dim(0), " rows do not split into ", batch, " samples");
  auto g = detail::gate_from_logits(detail::linear(x.detach(), params.token_w, params.token_b), mode, temperature, rng,
                                    {});
  TokenDecision<T> d;
  d.batch = batch;
  d.tokens = static_cast<int>(x.dim(0) / batch);
  d.scores = reshape(g.scores, {x.dim(0)});
  d.mask = std::move(g.mask);
  d.gate = g.gate;
  return d;
}

template <typename T>
WidthDecision<T> full_width(int batch, int heads) {
  WidthDecision<T> d;
  d.batch = batch;
  d.heads = heads;
  d.head_scores = BasicTensor<T>(Shape{batch, heads}, T(1));
  d.channel_scores = d.head_scores;
  d.head_mask.assign(static_cast<std::size_t>(batch * heads), 1);
  d.channel_mask = d.head_mask;
  d.head_gate = d.head_scores;
  d.channel_gate = d.head_scores;
  return d;
}

template <typename T>
WidthDecision<T> fixed_width(int batch, const std::vector<std::uint8_t>& head_mask,
                             const std::vector<std::uint8_t>& channel_mask) {
  require(head_mask.size() == channel_mask.size(), "fixed_width: head and channel masks differ in length");
  const int heads = static_cast<int>(head_mask.size());
  WidthDecision<T> d;
  d.batch = batch;
  d.heads = heads;
  for (int b = 0; b < batch; ++b) {
    d.head_mask.insert(d.head_mask.end(), head_mask.begin(), head_mask.end());
    d.channel_mask.insert(d.channel_mask.end(), channel_mask.begin(), channel_mask.end());
  }
  d.head_gate = mask_tensor<T>(d.head_mask, {batch, heads});
  d.channel_gate = mask_tensor<T>(d.channel_mask, {batch, heads});
  d.head_scores = d.head_gate;
  d.channel_scores = d.channel_gate;
  return d;
}

template <typename T>
TokenDecision<T> fixed_tokens(int batch, int tokens, std::vector<std::uint8_t> mask) {
  require(static_cast<int>(mask.size()) == batch * tokens, "fixed_tokens: mask of length ", mask.size(), " for ",
          batch, " x ", tokens, " tokens");
  TokenDecision<T> d;
  d.batch = batch;
  d.tokens = tokens;
  d.gate = mask_tensor<T>(mask, {batch * tokens, 1});
  d.scores = mask_tensor<T>(mask, {batch * tokens});
  d.mask = std::move(mask);
  return d;
}

template <typename T>
TokenDecision<T> full_tokens(int batch, int tokens) {
  return fixed_tokens<T>(batch, tokens, std::vector<std::uint8_t>(static_cast<std::size_t>(batch * tokens), 1));
}

namespace detail {

template <typename T>
std::vector<int> rank_descending(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  return order;
}

}  // namespace detail

/// Per-head L2 norms over the head's slices of W_Q, W_K, W_V (columns) and
/// W_O (rows); per-group L2 norms over W_1 columns and W_2 rows.
template <typename T>
std::vector<double> head_magnitudes(const BlockWeights<T>& block, int heads) {
  const std::int64_t c = block.w_q.dim(0);
  const std::int64_t width = block.w_q.dim(1) / heads;
  std::vector<double> score(static_cast<std::size_t>(heads), 0.0);
  for (int h = 0; h < heads; ++h) {
    double acc = 0;
    for (const auto* w : {&block.w_q, &block.w_k, &block.w_v}) {
      for (std::int64_t r = 0; r < c; ++r)
        for (std::int64_t j = h * width; j < (h + 1) * width; ++j) {
          const double v = (*w)[static_cast<std::size_t>(r * w->dim(1) + j)];
          acc += v * v;
        }
    }
    const std::int64_t out = block.w_o.dim(1);
    for (std::int64_t r = h * width; r < (h + 1) * width; ++r)
      for (std::int64_t j = 0; j < out; ++j) {
        const double v = block.w_o[static_cast<std::size_t>(r * out + j)];
        acc += v * v;
      }
    score[static_cast<std::size_t>(h)] = std::sqrt(acc);
  }
  return score;
}

template <typename T>
std::vector<double> group_magnitudes(const BlockWeights<T>& block, int heads) {
  const std::int64_t c = block.w_1.dim(0);
  const std::int64_t hidden = block.w_1.dim(1);
  const std::int64_t width = hidden / heads;
  const std::int64_t out = block.w_2.dim(1);
  std::vector<double> score(static_cast<std::size_t>(heads), 0.0);
  for (int g = 0; g < heads; ++g) {
    double acc = 0;
    for (std::int64_t r = 0; r < c; ++r)
      for (std::int64_t j = g * width; j < (g + 1) * width; ++j) {
        const double v = block.w_1[static_cast<std::size_t>(r * hidden + j)];
        acc += v * v;
      }
    for (std::int64_t r = g * width; r < (g + 1) * width; ++r)
      for (std::int64_t j = 0; j < out; ++j) {
        const double v = block.w_2[static_cast<std::size_t>(r * out + j)];
        acc += v * v;
      }
    score[static_cast<std::size_t>(g)] = std::sqrt(acc);
  }
  return score;
}

/// Descending magnitude ranking; ties go to the lower index.
template <typename T>
ProtectionIndex magnitude_rank(const BlockWeights<T>& block, int heads) {
  ProtectionIndex p;
  p.head_rank = detail::rank_descending<T>(head_magnitudes(block, heads));
  p.group_rank = detail::rank_descending<T>(group_magnitudes(block, heads));
  p.head = p.head_rank.front();
  p.group = p.group_rank.front();
  return p;
}

/// Fixes the protected head and group of every layer from the current
/// weights. Called once, before dynamic fine-tuning starts.
template <typename T>
void compute_protection(DitModel<T>& model) {
  model.protection.clear();
  for (const auto& b : model.blocks) model.protection.push_back(magnitude_rank(b, model.config.heads));
}

}  // namespace dydit
