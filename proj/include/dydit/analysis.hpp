#pragma once

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <vector>

#include "dydit/dataset.hpp"
#include "dydit/diffusion.hpp"
#include "dydit/dit.hpp"
#include "dydit/flops.hpp"
#include "dydit/model.hpp"
#include "dydit/schedule.hpp"

namespace dydit {

/// Min-max normalization to [0, 1]; a constant input maps to all zeros.
inline std::vector<double> normalize_minmax(const std::vector<double>& v) {
  if (v.empty()) return {};
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, range = *hi - *lo;
  std::vector<double> out(v.size(), 0.0);
  if (range > 0)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - a) / range;
  return out;
}

/// Eval-mode noise prediction in token layout. Dynamic models use their
/// routers in eval mode (masked execution, so samples in a batch may carry
/// different timesteps); static models run the plain network.
template <typename T>
ForwardResult<T> eval_forward(const DitModel<T>& model, const BasicTensor<T>& x_t, std::span<const int> ts,
                              std::span<const int> ys) {
  NoGradGuard no_grad;
  if (model.dynamic) {
    LearnedRouting<T> routing(model, RouteMode::kEval);
    return dit_forward(model, x_t, ts, ys, routing, ExecMode::kTrainMasked);
  }
  FullRouting<T> full(model.config);
  return dit_forward(model, x_t, ts, ys, full, ExecMode::kStatic);
}

/// Per-token squared error between two B*N x P token tensors, averaged over
/// the patch vector.
template <typename T>
std::vector<double> token_errors(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require(pred.shape() == target.shape() && pred.rank() == 2, "token_errors: shape mismatch");
  const auto rows = pred.dim(0), cols = pred.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows));
  auto p = pred.data();
  auto q = target.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const double d = static_cast<double>(p[static_cast<std::size_t>(r * cols + c)]) - q[static_cast<std::size_t>(r * cols + c)];
      s += d * d;
    }
    out[static_cast<std::size_t>(r)] = s / static_cast<double>(cols);
  }
  return out;
}

struct LossMap {
  std::vector<double> raw;         // per-token squared error
  std::vector<double> normalized;  // min-max normalized raw
};

/// Per-patch denoising loss of a single image at fixed t and noise.
template <typename T>
LossMap loss_map(const DitModel<T>& model, const BasicTensor<T>& x0, int y, int t, const BasicTensor<T>& eps) {
  require(x0.rank() == 4 && x0.dim(0) == 1, "loss_map: expects a single image of shape 1 x cin x E x E");
  const auto sched = build_schedule(model.diffusion);
  const auto x_t = q_sample(x0, t, eps, sched);
  const int ts[1] = {t}, ys[1] = {y};
  auto fwd = eval_forward(model, x_t, ts, ys);
  LossMap m;
  m.raw = token_errors(fwd.out, patchify_data(eps, model.config));
  m.normalized = normalize_minmax(m.raw);
  return m;
}

/// Unit-variance noise for image `index` at timestep t, shared across models.
template <typename T>
BasicTensor<T> analysis_noise(const ModelConfig& cfg, std::uint64_t seed, int index, int t) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(t)));
  BasicTensor<T> eps(Shape{1, cfg.channels_in, cfg.extent, cfg.extent});
  for (auto& v : eps.mutable_data()) v = static_cast<T>(rng.normal());
  return eps;
}

/// Mean L_DiT over `indices` at a fixed timestep, noise keyed by (seed, index, t).
template <typename T>
double mean_loss_at(const DitModel<T>& model, const DatasetContainer& data, const std::vector<int>& indices, int t,
                    std::uint64_t seed, int chunk = 64) {
  const auto sched = build_schedule(model.diffusion);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(chunk)) {
    const std::vector<int> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + chunk)));
    std::vector<BasicTensor<T>> noise;
    for (int i : part) noise.push_back(analysis_noise<T>(model.config, seed, i, t));
    auto eps = concat(noise, 0);
    auto x0 = data.images<T>(part);
    const std::vector<int> ts(part.size(), t);
    auto x_t = q_sample(x0, t, eps, sched);
    auto fwd = eval_forward(model, x_t, ts, data.labels_of(part));
    for (double e : token_errors(fwd.out, patchify_data(eps, model.config))) total += e;
    count += part.size() * static_cast<std::size_t>(model.config.tokens());
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Held-out denoising loss averaged over `draws` timesteps per image, drawn
/// uniformly from [1, T] with a stream keyed by (seed, index).
template <typename T>
double held_out_loss(const DitModel<T>& model, const DatasetContainer& data, const std::vector<int>& indices,
                     std::uint64_t seed, int draws = 8) {
  const auto sched = build_schedule(model.diffusion);
  NoGradGuard no_grad;
  double total = 0;
  std::size_t count = 0;
  for (int d = 0; d < draws; ++d) {
    std::vector<int> ts;
    std::vector<BasicTensor<T>> noise;
    for (int i : indices) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 0x4e1d + static_cast<std::uint64_t>(d)));
      ts.push_back(static_cast<int>(rng.integer(1, sched.T())));
      BasicTensor<T> eps(Shape{1, data.channels, data.extent, data.extent});
      for (auto& v : eps.mutable_data()) v = static_cast<T>(rng.normal());
      noise.push_back(eps);
    }
    auto eps = concat(noise, 0);
    auto x_t = q_sample(data.images<T>(indices), std::span<const int>(ts), eps, sched);
    auto fwd = eval_forward(model, x_t, ts, data.labels_of(indices));
    total += diffusion_loss(fwd.out, patchify_data(eps, model.config)).item() * static_cast<double>(indices.size());
    count += indices.size();
  }
  return total / static_cast<double>(count);
}

struct GapPoint {
  int t = 0;
  double small = 0;
  double large = 0;
  double gap() const { return small - large; }
};

/// Mean L_DiT(small) - L_DiT(large) over a held-out set at each grid timestep,
/// both models seeing identical noise.
template <typename T>
std::vector<GapPoint> loss_gap_curve(const DitModel<T>& small, const DitModel<T>& large, const DatasetContainer& data,
                                     const std::vector<int>& indices, const std::vector<int>& t_grid,
                                     std::uint64_t seed) {
  require(small.diffusion == large.diffusion, "loss_gap_curve: models use different diffusion schedules");
  std::vector<GapPoint> out;
  for (int t : t_grid) {
    GapPoint p;
    p.t = t;
    p.small = mean_loss_at(small, data, indices, t, seed);
    p.large = mean_loss_at(large, data, indices, t, seed);
    out.push_back(p);
  }
  return out;
}

/// Evenly spaced timesteps 1 .. T with `points` entries.
inline std::vector<int> timestep_grid(int T, int points) {
  require(points >= 2 && points <= T, "timestep_grid: need 2 <= points <= T");
  std::vector<int> out;
  for (int i = 0; i < points; ++i)
    out.push_back(1 + static_cast<int>(static_cast<long long>(i) * (T - 1) / (points - 1)));
  return out;
}

struct ActivationRow {
  int timestep = 0;
  int layer = 0;
  int heads = 0;
  int groups = 0;
};

inline std::vector<ActivationRow> activation_map(const ArchitectureSchedule& s) {
  std::vector<ActivationRow> out;
  for (std::size_t i = 0; i < s.timesteps.size(); ++i)
    for (std::size_t l = 0; l < s.widths[i].size(); ++l) {
      ActivationRow r;
      r.timestep = s.timesteps[i];
      r.layer = static_cast<int>(l);
      for (auto v : s.widths[i][l].head) r.heads += v ? 1 : 0;
      for (auto v : s.widths[i][l].channel) r.groups += v ? 1 : 0;
      out.push_back(r);
    }
  return out;
}

struct TokenFlopsMap {
  std::vector<double> raw;  // MACs attributed to each patch, summed over timesteps
  std::vector<double> normalized;
};

/// Per-patch block FLOPs accumulated over `timesteps` for each image: the
/// token's MLP work under its routing decision plus an even share of the
/// attention work. Images are noised to each timestep with noise keyed by
/// (seed, index, t).
template <typename T>
std::vector<TokenFlopsMap> token_flops_map(const DitModel<T>& model, const DatasetContainer& data,
                                           const std::vector<int>& indices, const std::vector<int>& timesteps,
                                           std::uint64_t seed) {
  const auto& cfg = model.config;
  const auto sched = build_schedule(model.diffusion);
  const int n = cfg.tokens();
  std::vector<TokenFlopsMap> maps(indices.size());
  for (auto& m : maps) m.raw.assign(static_cast<std::size_t>(n), 0.0);
  const auto x0 = data.images<T>(indices);
  const auto ys = data.labels_of(indices);
  for (int t : timesteps) {
    std::vector<BasicTensor<T>> noise;
    for (int i : indices) noise.push_back(analysis_noise<T>(cfg, seed, i, t));
    auto eps = concat(noise, 0);
    const std::vector<int> ts(indices.size(), t);
    auto fwd = eval_forward(model, q_sample(x0, t, eps, sched), ts, ys);
    for (const auto& rec : fwd.layers)
      for (std::size_t b = 0; b < indices.size(); ++b) {
        const int bi = static_cast<int>(b);
        const double attn_share =
            static_cast<double>(flops_mhsa(rec.width.active_heads(bi), n, cfg.channels, cfg.head_dim())) / n;
        const double mlp_token =
            static_cast<double>(flops_mlp(rec.width.active_groups(bi), 1, cfg.channels, cfg.group_dim()));
        for (int k = 0; k < n; ++k)
          maps[b].raw[static_cast<std::size_t>(k)] +=
              attn_share + (rec.tokens.mask[b * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)] ? mlp_token : 0.0);
      }
  }
  for (auto& m : maps) m.normalized = normalize_minmax(m.raw);
  return maps;
}

/// Means of `values` over tokens flagged 1 and 0 in `mask`.
inline std::pair<double, double> split_means(const std::vector<double>& values, const std::vector<std::uint8_t>& mask) {
  require(values.size() == mask.size(), "split_means: size mismatch");
  double a = 0, b = 0;
  int na = 0, nb = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask[i]) {
      a += values[i];
      ++na;
    } else {
      b += values[i];
      ++nb;
    }
  }
  return {na ? a / na : 0.0, nb ? b / nb : 0.0};
}

}  // namespace dydit
