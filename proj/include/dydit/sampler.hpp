#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dydit/diffusion.hpp"
#include "dydit/dit.hpp"
#include "dydit/flops.hpp"
#include "dydit/schedule.hpp"

namespace dydit {

enum class SamplerKind { kDdpm, kDdim };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::kDdpm;
  int steps = 100;
  double eta = 0.0;  // DDIM only
};

inline SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "ddpm") return SamplerKind::kDdpm;
  if (s == "ddim") return SamplerKind::kDdim;
  fail("unknown sampler '", s, "' (expected ddpm or ddim)");
}

/// How width and token decisions are made while sampling.
enum class SampleRouting {
  kCompiled,  // width from a compiled schedule with pre-sliced weights
  kOnTheFly,  // width from eval-mode routers at every step, sliced on the fly
  kStatic,    // the plain DiT: every head, group and token
};

struct SampleRequest {
  int batch_size = 1;
  std::vector<int> labels;  // one per sample; a single entry is broadcast
  double guidance = 1.0;    // classifier-free guidance weight
  std::uint64_t seed = 0;
};

template <typename T>
struct SampleResult {
  BasicTensor<T> images;  // B x cin x E x E, roughly in [-1, 1]
  FlopsReport report;
  double seconds = 0;
};

/// Generates a batch. Every sample shares the per-timestep width (masks
/// depend only on t); token routing runs per sample with gather/scatter.
/// Sample i draws its initial noise and per-step noise from its own stream
/// derived from (seed, i).
template <typename T>
SampleResult<T> batched_sample(const DitModel<T>& model, const ArchitectureSchedule* schedule, const SamplerSpec& spec,
                               const SampleRequest& request, SampleRouting routing_kind,
                               const SliceCache<T>* cache = nullptr) {
  const auto& cfg = model.config;
  require(request.batch_size >= 1, "batched_sample: batch_size must be >= 1");
  require(request.labels.size() == 1 || static_cast<int>(request.labels.size()) == request.batch_size,
          "batched_sample: need 1 or ", request.batch_size, " labels, got ", request.labels.size());
  const auto sched = build_schedule(model.diffusion);
  const auto timesteps = sampler_timesteps(sched.T(), spec.steps);

  std::optional<SliceCache<T>> own_cache;
  if (routing_kind == SampleRouting::kCompiled) {
    require(schedule != nullptr, "batched_sample: compiled routing needs a schedule");
    const auto fp = model_fingerprint(model);
    require(schedule->fingerprint == fp, "schedule fingerprint mismatch: schedule ", schedule->fingerprint, ", model ",
            fp);
    for (int t : timesteps) (void)schedule->index_of(t);
    if (!cache) cache = &own_cache.emplace(model, *schedule);
  }

  NoGradGuard no_grad;
  const auto start = std::chrono::steady_clock::now();
  const int b = request.batch_size;
  const bool guided = request.guidance != 1.0;
  const int rows = guided ? 2 * b : b;

  std::vector<int> ys(static_cast<std::size_t>(rows));
  for (int i = 0; i < b; ++i) {
    ys[static_cast<std::size_t>(i)] = request.labels.size() == 1 ? request.labels[0] : request.labels[static_cast<std::size_t>(i)];
    if (guided) ys[static_cast<std::size_t>(b + i)] = cfg.null_label();
  }

  const Shape image_shape{b, cfg.channels_in, cfg.extent, cfg.extent};
  const std::size_t per = static_cast<std::size_t>(cfg.channels_in * cfg.extent * cfg.extent);
  std::vector<Rng> streams;
  for (int i = 0; i < b; ++i) streams.emplace_back(derive_seed(request.seed, static_cast<std::uint64_t>(i)));
  BasicTensor<T> x(image_shape);
  {
    auto xd = x.mutable_data();
    for (int i = 0; i < b; ++i)
      for (std::size_t j = 0; j < per; ++j) xd[static_cast<std::size_t>(i) * per + j] = static_cast<T>(streams[static_cast<std::size_t>(i)].normal());
  }

  FullRouting<T> full(cfg);
  LearnedRouting<T> learned(model, RouteMode::kEval);
  std::optional<ScheduledRouting<T>> scheduled;
  if (routing_kind == SampleRouting::kCompiled) scheduled.emplace(model, *schedule, cache);
  RoutingPolicy<T>* policy = routing_kind == SampleRouting::kCompiled  ? static_cast<RoutingPolicy<T>*>(&*scheduled)
                             : routing_kind == SampleRouting::kOnTheFly ? static_cast<RoutingPolicy<T>*>(&learned)
                                                                        : static_cast<RoutingPolicy<T>*>(&full);
  const ExecMode mode = routing_kind == SampleRouting::kStatic ? ExecMode::kStatic : ExecMode::kInferSliced;

  SampleResult<T> result;
  for (std::size_t si = 0; si < timesteps.size(); ++si) {
    const int t = timesteps[si];
    const int t_prev = si + 1 < timesteps.size() ? timesteps[si + 1] : 0;
    if (scheduled) scheduled->set_timestep(t);

    BasicTensor<T> input = x;
    if (guided) input = concat<T>({x, x}, 0);
    std::vector<int> ts(static_cast<std::size_t>(rows), t);
    auto fwd = dit_forward(model, input, ts, ys, *policy, mode);
    append_report(result.report, fwd, cfg, t);
    auto eps = unpatchify_data(fwd.out, cfg);
    if (guided) eps = cfg_combine(slice(eps, 0, 0, b), slice(eps, 0, b, 2 * b), request.guidance);

    BasicTensor<T> z(image_shape);
    auto zd = z.mutable_data();
    for (int i = 0; i < b; ++i)
      for (std::size_t j = 0; j < per; ++j) zd[static_cast<std::size_t>(i) * per + j] = static_cast<T>(streams[static_cast<std::size_t>(i)].normal());
    if (spec.kind == SamplerKind::kDdpm) {
      x = ddpm_step(x, eps, t, t_prev, sched, t_prev == 0 ? zeros_like(z) : z);
    } else {
      x = ddim_step(x, eps, t, t_prev, sched, spec.eta, &z);
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.images = x;
  return result;
}

/// Median wall-clock of `runs` timed sampling runs after one warm-up run.
template <typename T>
double median_seconds(const DitModel<T>& model, const ArchitectureSchedule* schedule, const SamplerSpec& spec,
                      const SampleRequest& request, SampleRouting routing, int runs = 5) {
  std::optional<SliceCache<T>> cache;
  if (routing == SampleRouting::kCompiled) cache.emplace(model, *schedule);
  const SliceCache<T>* c = cache ? &*cache : nullptr;
  (void)batched_sample(model, schedule, spec, request, routing, c);
  std::vector<double> times;
  for (int i = 0; i < runs; ++i) times.push_back(batched_sample(model, schedule, spec, request, routing, c).seconds);
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace dydit
