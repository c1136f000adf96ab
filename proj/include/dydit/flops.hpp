#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dydit/dit.hpp"
#include "dydit/model.hpp"
#include "dydit/primitives.hpp"

namespace dydit {

// Counts are multiply-accumulates over the MHSA and MLP blocks only, in the
// units of the closed-form complexity expressions.

/// Floating-point operations of a multiply-accumulate count: one multiply
/// and one add each.
inline constexpr std::int64_t macs_to_flops(std::int64_t macs) { return 2 * macs; }

inline std::int64_t flops_mhsa(std::int64_t active_heads, std::int64_t tokens, std::int64_t channels,
                               std::int64_t head_dim) {
  require(active_heads >= 0 && tokens >= 0 && channels >= 0 && head_dim >= 0, "flops_mhsa: negative count");
  return active_heads * (4 * tokens * channels * head_dim + 2 * tokens * tokens * head_dim);
}

inline std::int64_t flops_mlp(std::int64_t active_groups, std::int64_t active_tokens, std::int64_t channels,
                              std::int64_t group_dim) {
  require(active_groups >= 0 && active_tokens >= 0 && channels >= 0 && group_dim >= 0, "flops_mlp: negative count");
  return active_groups * 2 * active_tokens * channels * group_dim;
}

inline std::int64_t flops_layer_static(const ModelConfig& cfg) {
  return flops_mhsa(cfg.heads, cfg.tokens(), cfg.channels, cfg.head_dim()) +
         flops_mlp(cfg.heads, cfg.tokens(), cfg.channels, cfg.group_dim());
}

/// F_static for one sample at one timestep.
inline std::int64_t flops_static(const ModelConfig& cfg) { return cfg.layers * flops_layer_static(cfg); }

/// Binary decisions of one layer for one sample.
struct LayerMasks {
  std::vector<std::uint8_t> head;
  std::vector<std::uint8_t> channel;
  std::vector<std::uint8_t> token;
};

inline int popcount(const std::vector<std::uint8_t>& m) {
  int n = 0;
  for (auto v : m) n += v ? 1 : 0;
  return n;
}

inline std::int64_t flops_layer(const LayerMasks& m, const ModelConfig& cfg) {
  require(static_cast<int>(m.head.size()) == cfg.heads && static_cast<int>(m.channel.size()) == cfg.heads,
          "flops_dynamic: width masks must have ", cfg.heads, " entries, got ", m.head.size(), " and ",
          m.channel.size());
  require(static_cast<int>(m.token.size()) == cfg.tokens(), "flops_dynamic: token mask must have ", cfg.tokens(),
          " entries, got ", m.token.size());
  return flops_mhsa(popcount(m.head), cfg.tokens(), cfg.channels, cfg.head_dim()) +
         flops_mlp(popcount(m.channel), popcount(m.token), cfg.channels, cfg.group_dim());
}

/// F_dynamic for one sample at one timestep.
inline std::int64_t flops_dynamic(const std::vector<LayerMasks>& layers, const ModelConfig& cfg) {
  require(static_cast<int>(layers.size()) == cfg.layers, "flops_dynamic: ", layers.size(), " layer decisions for ",
          cfg.layers, " layers");
  std::int64_t total = 0;
  for (const auto& m : layers) total += flops_layer(m, cfg);
  return total;
}

/// Per-sample layer masks recorded by a forward pass.
template <typename T>
std::vector<std::vector<LayerMasks>> recorded_masks(const ForwardResult<T>& fwd) {
  std::vector<std::vector<LayerMasks>> out(static_cast<std::size_t>(fwd.batch));
  for (const auto& rec : fwd.layers) {
    const int n = rec.tokens.tokens;
    for (int b = 0; b < fwd.batch; ++b) {
      LayerMasks m;
      m.head = rec.width.head_row(b);
      m.channel = rec.width.channel_row(b);
      m.token.assign(rec.tokens.mask.begin() + b * n, rec.tokens.mask.begin() + (b + 1) * n);
      out[static_cast<std::size_t>(b)].push_back(std::move(m));
    }
  }
  return out;
}

template <typename T>
std::vector<std::int64_t> per_sample_flops(const ForwardResult<T>& fwd, const ModelConfig& cfg) {
  std::vector<std::int64_t> out;
  for (const auto& layers : recorded_masks(fwd)) out.push_back(flops_dynamic(layers, cfg));
  return out;
}

/// Differentiable F_dynamic per sample (length-B tensor) built from the
/// straight-through gates, so its gradient reaches router logits.
template <typename T>
BasicTensor<T> differentiable_flops(const ForwardResult<T>& fwd, const ModelConfig& cfg) {
  const std::int64_t b = fwd.batch;
  const double per_head = static_cast<double>(flops_mhsa(1, cfg.tokens(), cfg.channels, cfg.head_dim()));
  const double per_group_token = static_cast<double>(flops_mlp(1, 1, cfg.channels, cfg.group_dim()));
  BasicTensor<T> total(Shape{b});
  for (const auto& rec : fwd.layers) {
    auto heads = sum(rec.width.head_gate, 1);
    auto groups = sum(rec.width.channel_gate, 1);
    auto toks = sum(reshape(rec.tokens.gate, {b, rec.tokens.tokens}), 1);
    total = add(total, add(scale(heads, per_head), scale(mul(groups, toks), per_group_token)));
  }
  return total;
}

/// (mean_b F_b / F_static - lambda)^2
inline double flops_loss(const std::vector<double>& per_sample_dynamic, double f_static, double lambda) {
  require(!per_sample_dynamic.empty(), "flops_loss: empty batch");
  require(lambda > 0 && lambda <= 1, "flops_loss: lambda must be in (0, 1], got ", lambda);
  double mean_ratio = 0;
  for (double f : per_sample_dynamic) mean_ratio += f / f_static;
  mean_ratio /= static_cast<double>(per_sample_dynamic.size());
  return (mean_ratio - lambda) * (mean_ratio - lambda);
}

template <typename T>
BasicTensor<T> flops_loss(const BasicTensor<T>& per_sample_dynamic, double f_static, double lambda) {
  require(per_sample_dynamic.numel() > 0, "flops_loss: empty batch");
  require(lambda > 0 && lambda <= 1, "flops_loss: lambda must be in (0, 1], got ", lambda);
  auto ratio = mean(scale(per_sample_dynamic, 1.0 / f_static));
  return square(add(ratio, BasicTensor<T>::scalar(static_cast<T>(-lambda))));
}

/// Multiply-accumulates executed inside MHSA and MLP blocks, read off a
/// matmul trace: an (a x b)(b x c) product contributes a*b*c.
inline std::int64_t counting_oracle(const MatmulTrace& trace) {
  std::int64_t total = 0;
  for (const auto& r : trace.records)
    if (r.region == "mhsa" || r.region == "mlp") total += r.batch * r.m * r.k * r.n;
  return total;
}

/// All multiply-accumulates in the trace, including embeddings, adaLN,
/// routers and the output head.
inline std::int64_t counting_total(const MatmulTrace& trace) {
  std::int64_t total = 0;
  for (const auto& r : trace.records) total += r.batch * r.m * r.k * r.n;
  return total;
}

struct FlopsEntry {
  int timestep = 0;
  int layer = 0;
  int active_heads = 0;
  int active_groups = 0;
  std::int64_t active_tokens = 0;  // summed over the samples of the batch
  std::int64_t dynamic = 0;
  std::int64_t static_total = 0;
};

/// Dynamic vs static block FLOPs per (timestep, layer), summed over samples.
struct FlopsReport {
  std::vector<FlopsEntry> entries;
  double lambda = 0;  // training target, 0 when unknown

  std::int64_t total_dynamic() const {
    std::int64_t s = 0;
    for (const auto& e : entries) s += e.dynamic;
    return s;
  }
  std::int64_t total_static() const {
    std::int64_t s = 0;
    for (const auto& e : entries) s += e.static_total;
    return s;
  }
  double ratio() const {
    const auto s = total_static();
    return s == 0 ? 0.0 : static_cast<double>(total_dynamic()) / static_cast<double>(s);
  }

  void write_table(std::ostream& os) const {
    os << "timestep\tlayer\tactive_heads\tactive_groups\tactive_tokens\tF_dynamic[MAC]\tF_static[MAC]\tratio\n";
    for (const auto& e : entries) {
      os << e.timestep << '\t' << e.layer << '\t' << e.active_heads << '\t' << e.active_groups << '\t'
         << e.active_tokens << '\t' << e.dynamic << '\t' << e.static_total << '\t'
         << (e.static_total ? static_cast<double>(e.dynamic) / static_cast<double>(e.static_total) : 0.0) << '\n';
    }
  }
};

/// Appends one row per layer for a forward pass at `timestep`. Width masks
/// are reported from the first sample (they are shared in batched sampling).
template <typename T>
void append_report(FlopsReport& report, const ForwardResult<T>& fwd, const ModelConfig& cfg, int timestep) {
  const auto masks = recorded_masks(fwd);
  for (int l = 0; l < cfg.layers; ++l) {
    FlopsEntry e;
    e.timestep = timestep;
    e.layer = l;
    e.active_heads = popcount(masks[0][static_cast<std::size_t>(l)].head);
    e.active_groups = popcount(masks[0][static_cast<std::size_t>(l)].channel);
    for (const auto& sample : masks) {
      const auto& m = sample[static_cast<std::size_t>(l)];
      e.active_tokens += popcount(m.token);
      e.dynamic += flops_layer(m, cfg);
      e.static_total += flops_layer_static(cfg);
    }
    report.entries.push_back(e);
  }
}

}  // namespace dydit
