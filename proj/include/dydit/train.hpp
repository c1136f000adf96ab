#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dydit/checkpoint.hpp"
#include "dydit/dataset.hpp"
#include "dydit/diffusion.hpp"
#include "dydit/dit.hpp"
#include "dydit/flops.hpp"
#include "dydit/model.hpp"
#include "dydit/routing.hpp"

namespace dydit {

struct TrainConfig {
  double lambda = 0.5;  // target FLOPs ratio
  double lr = 1e-3;
  double router_lr = 1e-2;  // learning rate of router parameters
  int batch = 32;
  int steps = 2000;
  int warmup_steps = -1;  // negative: 10% of steps
  double label_dropout = 0.1;
  double temperature = 1.0;
  double temperature_final = -1.0;  // negative: no annealing
  double ema_decay = 0.98;          // running loss / FLOPs-ratio averages
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  int resolved_warmup() const { return warmup_steps < 0 ? steps / 10 : warmup_steps; }

  void validate() const {
    require(lambda > 0 && lambda <= 1, "train.lambda must be in (0, 1], got ", lambda);
    require(lr > 0 && router_lr >= 0, "train.lr must be > 0 and train.router_lr >= 0");
    require(batch >= 1, "train.batch must be >= 1");
    require(steps >= 0, "train.steps must be >= 0");
    require(resolved_warmup() <= steps, "train.warmup_steps (", resolved_warmup(), ") exceeds train.steps (", steps,
            ")");
    require(label_dropout >= 0 && label_dropout <= 1, "train.label_dropout must be in [0, 1]");
    require(temperature > 0, "train.temperature must be > 0");
    require(ema_decay >= 0 && ema_decay < 1, "train.ema_decay must be in [0, 1)");
  }

  double temperature_at(std::int64_t step) const {
    if (temperature_final <= 0 || steps == 0) return temperature;
    const double f = std::clamp(static_cast<double>(step) / steps, 0.0, 1.0);
    return temperature + (temperature_final - temperature) * f;
  }
};

struct LossBreakdown {
  double l_dit = 0;
  std::optional<double> l_flops;          // dynamic models only
  std::optional<double> l_dit_complete;   // warm-up only
  double total = 0;
  double ratio = 1.0;  // batch mean F_dynamic / F_static of the hard masks
  int min_width = 0;   // smallest head/group popcount of any sample and layer
  bool applied = true;
  std::string diagnostic;
};

inline bool is_router_parameter(const std::string& name) { return name.find(".router.") != std::string::npos; }

/// One Adam update (bias-corrected, no weight decay) from the gradients
/// currently stored on the model's parameters.
inline void adam_update(DitModel<float>& model, TrainState& state, const TrainConfig& cfg) {
  auto params = model.named_parameters();
  if (state.adam_m.empty()) {
    for (const auto& [name, p] : params) {
      state.adam_m.emplace_back(p.shape());
      state.adam_v.emplace_back(p.shape());
    }
  }
  require(state.adam_m.size() == params.size(), "optimizer state has ", state.adam_m.size(), " slots for ",
          params.size(), " parameters");
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    if (!p.has_grad()) continue;
    const double lr = is_router_parameter(name) ? cfg.router_lr : cfg.lr;
    require(state.adam_m[i].shape() == p.shape(), "optimizer moment shape mismatch for '", name, "'");
    auto g = p.grad();
    auto w = p.mutable_data();
    auto m = state.adam_m[i].mutable_data();
    auto v = state.adam_v[i].mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(cfg.beta1 * m[j] + (1 - cfg.beta1) * gj);
      v[j] = static_cast<float>(cfg.beta2 * v[j] + (1 - cfg.beta2) * gj * gj);
      const double mh = m[j] / c1;
      const double vh = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * mh / (std::sqrt(vh) + cfg.adam_eps));
    }
  }
}

/// One optimization step on (x0, labels). Timesteps, noise, label dropout and
/// Gumbel noise come from a stream keyed by (seed, state.step), so a resumed
/// run replays the same draws.
inline LossBreakdown train_step(DitModel<float>& model, TrainState& state, const TrainConfig& cfg, const Tensor& x0,
                                std::vector<int> labels) {
  const auto& mc = model.config;
  const int b = static_cast<int>(x0.dim(0));
  require(static_cast<int>(labels.size()) == b, "train_step: ", labels.size(), " labels for a batch of ", b);
  const auto sched = build_schedule(model.diffusion);
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(state.step), 0x7a11));

  std::vector<int> ts(static_cast<std::size_t>(b));
  for (auto& t : ts) t = static_cast<int>(rng.integer(1, sched.T()));
  Tensor eps(x0.shape());
  for (auto& v : eps.mutable_data()) v = static_cast<float>(rng.normal());
  for (auto& y : labels)
    if (rng.uniform() < cfg.label_dropout) y = mc.null_label();

  model.zero_grad();
  const auto x_t = q_sample(x0, std::span<const int>(ts), eps, sched);
  const auto target = patchify_data(eps, mc);

  LossBreakdown out;
  Tensor total;
  if (model.dynamic) {
    LearnedRouting<float> routing(model, RouteMode::kTrain, cfg.temperature_at(state.step), &rng);
    auto fwd = dit_forward(model, x_t, ts, labels, routing, ExecMode::kTrainMasked);
    auto l_dit = diffusion_loss(fwd.out, target);
    const double f_static = static_cast<double>(flops_static(mc));
    auto l_flops = flops_loss(differentiable_flops(fwd, mc), f_static, cfg.lambda);
    total = add(l_dit, l_flops);
    out.l_dit = l_dit.item();
    out.l_flops = l_flops.item();

    const auto per_sample = per_sample_flops(fwd, mc);
    double r = 0;
    for (auto f : per_sample) r += static_cast<double>(f) / f_static;
    out.ratio = r / b;
    out.min_width = mc.heads;
    for (const auto& rec : fwd.layers)
      for (int i = 0; i < b; ++i)
        out.min_width = std::min({out.min_width, rec.width.active_heads(i), rec.width.active_groups(i)});

    if (state.step < cfg.resolved_warmup()) {
      FullRouting<float> full(mc);
      auto complete = dit_forward(model, x_t, ts, labels, full, ExecMode::kStatic);
      auto l_complete = diffusion_loss(complete.out, target);
      out.l_dit_complete = l_complete.item();
      total = add(total, l_complete);
    }
  } else {
    FullRouting<float> full(mc);
    auto fwd = dit_forward(model, x_t, ts, labels, full, ExecMode::kStatic);
    total = diffusion_loss(fwd.out, target);
    out.l_dit = total.item();
    out.min_width = mc.heads;
  }
  out.total = total.item();

  (void)reverse_accumulate(total);
  bool finite = std::isfinite(out.total);
  for (const auto& [name, p] : model.named_parameters())
    if (finite && p.has_grad() && !all_finite(p.grad())) {
      finite = false;
      out.diagnostic = "non-finite gradient in '" + name + "'";
    }
  if (!finite) {
    if (out.diagnostic.empty()) out.diagnostic = "non-finite loss";
    out.diagnostic = "step " + std::to_string(state.step) + " aborted: " + out.diagnostic;
    out.applied = false;
    model.zero_grad();
    return out;
  }

  adam_update(model, state, cfg);
  model.zero_grad();
  if (!state.ema_initialized) {
    state.ema_ratio = out.ratio;
    state.ema_loss = out.l_dit;
    state.ema_initialized = true;
  } else {
    state.ema_ratio = cfg.ema_decay * state.ema_ratio + (1 - cfg.ema_decay) * out.ratio;
    state.ema_loss = cfg.ema_decay * state.ema_loss + (1 - cfg.ema_decay) * out.l_dit;
  }
  ++state.step;
  return out;
}

inline void write_log_header(std::ostream& os) { os << "step\tL_DiT\tL_FLOPs\tratio\n"; }

inline void write_log_line(std::ostream& os, std::int64_t step, const LossBreakdown& l) {
  os << step << '\t' << l.l_dit << '\t' << l.l_flops.value_or(0.0) << '\t' << l.ratio << '\n';
}

struct TrainHooks {
  std::ostream* log = nullptr;                                             // per-step log lines
  std::ostream* diagnostics = nullptr;                                     // aborted-step messages
  std::function<void(std::int64_t, const LossBreakdown&)> on_step;         // after every step
};

/// Runs steps [state.step, cfg.steps). An aborted step is skipped (its step
/// index is consumed); more than `max_aborts` consecutive aborts is an error.
inline void train(DitModel<float>& model, TrainState& state, const TrainConfig& cfg, const DatasetContainer& data,
                  const TrainHooks& hooks = {}, int max_aborts = 10) {
  cfg.validate();
  data.check_compatible(model.config);
  BatchSampler sampler(data.count, cfg.seed);
  int aborts = 0;
  while (state.step < cfg.steps) {
    const auto step = state.step;
    const auto idx = sampler.batch(step, cfg.batch);
    auto l = train_step(model, state, cfg, data.images(idx), data.labels_of(idx));
    if (!l.applied) {
      if (hooks.diagnostics) *hooks.diagnostics << l.diagnostic << '\n';
      require(++aborts <= max_aborts, "training diverged: ", aborts, " consecutive non-finite steps");
      ++state.step;
      continue;
    }
    aborts = 0;
    if (hooks.log) write_log_line(*hooks.log, step, l);
    if (hooks.on_step) hooks.on_step(step, l);
  }
}

/// Switches a trained static model to dynamic fine-tuning: fixes the
/// protected head/group per layer and enables the routers.
inline void begin_dynamic(DitModel<float>& model) {
  compute_protection(model);
  model.dynamic = true;
}

}  // namespace dydit
