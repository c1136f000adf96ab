#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dydit/error.hpp"
#include "dydit/io.hpp"
#include "dydit/model.hpp"

namespace dydit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Optimizer and bookkeeping state carried across steps. Moments are aligned
/// with DitModel::named_parameters(); empty until the first update.
struct TrainState {
  std::int64_t step = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  double ema_ratio = 1.0;
  double ema_loss = 0.0;
  bool ema_initialized = false;
};

struct Checkpoint {
  DitModel<float> model;
  TrainState state;
};

// Layout (all integers little-endian):
//   "DYDT", u32 version
//   u32 layers, channels, heads, patch, extent, channels_in, classes, freq_dim
//   u32 T, f64 beta_start, f64 beta_end
//   u32 flags (bit 0: dynamic)
//   u64 step, f64 ema_ratio, f64 ema_loss, u32 ema_initialized
//   u32 record count, then tensor records in this order:
//     model parameters (named_parameters order),
//     layer{i}.protect.head_rank / layer{i}.protect.group_rank,
//     adam.m.<name> / adam.v.<name> for each parameter when moments exist.

inline void write_checkpoint(std::ostream& os, const DitModel<float>& model, const TrainState& state) {
  const auto& c = model.config;
  os.write("DYDT", 4);
  io::put_u32(os, kCheckpointVersion);
  for (int v : {c.layers, c.channels, c.heads, c.patch, c.extent, c.channels_in, c.classes, c.freq_dim})
    io::put_u32(os, static_cast<std::uint32_t>(v));
  io::put_u32(os, static_cast<std::uint32_t>(model.diffusion.T));
  io::put_f64(os, model.diffusion.beta_start);
  io::put_f64(os, model.diffusion.beta_end);
  io::put_u32(os, model.dynamic ? 1u : 0u);
  io::put_u64(os, static_cast<std::uint64_t>(state.step));
  io::put_f64(os, state.ema_ratio);
  io::put_f64(os, state.ema_loss);
  io::put_u32(os, state.ema_initialized ? 1u : 0u);

  const auto params = model.named_parameters();
  const bool moments = !state.adam_m.empty();
  if (moments)
    require(state.adam_m.size() == params.size() && state.adam_v.size() == params.size(),
            "checkpoint: optimizer moments do not match parameter count");
  const std::size_t records = params.size() + 2 * model.protection.size() + (moments ? 2 * params.size() : 0);
  io::put_u32(os, static_cast<std::uint32_t>(records));
  for (const auto& [name, t] : params) io::write_tensor(os, name, t);
  auto ranks = [](const std::vector<int>& r) {
    std::vector<float> v(r.begin(), r.end());
    return Tensor(Shape{static_cast<std::int64_t>(r.size())}, std::move(v));
  };
  for (std::size_t i = 0; i < model.protection.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".protect.";
    io::write_tensor(os, p + "head_rank", ranks(model.protection[i].head_rank));
    io::write_tensor(os, p + "group_rank", ranks(model.protection[i].group_rank));
  }
  if (moments)
    for (std::size_t i = 0; i < params.size(); ++i) {
      io::write_tensor(os, "adam.m." + params[i].first, state.adam_m[i]);
      io::write_tensor(os, "adam.v." + params[i].first, state.adam_v[i]);
    }
}

inline void save_checkpoint(const DitModel<float>& model, const TrainState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot write checkpoint '", path, "'");
  write_checkpoint(out, model, state);
  require(static_cast<bool>(out), "failed writing checkpoint '", path, "'");
}

/// Reads a checkpoint. When `expected` is given, the stored ModelConfig must
/// match it field by field.
inline Checkpoint read_checkpoint(std::istream& is, const std::string& what = "checkpoint",
                                  const ModelConfig* expected = nullptr) {
  io::Reader r(is, what);
  r.magic("DYDT");
  const auto vat = r.offset();
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    r.error("version mismatch: file has version " + std::to_string(version) + ", reader supports " +
                std::to_string(kCheckpointVersion),
            vat);
  ModelConfig cfg;
  const char* names[] = {"layers", "channels", "heads", "patch", "extent", "channels_in", "classes", "freq_dim"};
  int* fields[] = {&cfg.layers, &cfg.channels, &cfg.heads, &cfg.patch, &cfg.extent, &cfg.channels_in, &cfg.classes, &cfg.freq_dim};
  for (int i = 0; i < 8; ++i) {
    *fields[i] = static_cast<int>(r.u32());
    if (expected) {
      const int* want[] = {&expected->layers, &expected->channels, &expected->heads, &expected->patch,
                           &expected->extent, &expected->channels_in, &expected->classes, &expected->freq_dim};
      require(*fields[i] == *want[i], what, ": config mismatch on model.", names[i], " (checkpoint ", *fields[i],
              ", expected ", *want[i], ")");
    }
  }
  cfg.validate();
  DiffusionConfig diff;
  diff.T = static_cast<int>(r.u32());
  diff.beta_start = r.f64();
  diff.beta_end = r.f64();
  (void)build_schedule(diff);
  const auto flags = r.u32();

  Checkpoint ck;
  ck.state.step = static_cast<std::int64_t>(r.u64());
  ck.state.ema_ratio = r.f64();
  ck.state.ema_loss = r.f64();
  ck.state.ema_initialized = r.u32() != 0;

  const auto count = r.u32();
  std::map<std::string, Tensor> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    auto [name, t] = io::read_tensor(r);
    if (records.count(name)) r.error("duplicate record '" + name + "'", at);
    records.emplace(std::move(name), std::move(t));
  }

  // Build a zero model of the stored shape, then fill it by name.
  auto& m = ck.model;
  m = init_model<float>(cfg, diff, 0);
  m.dynamic = (flags & 1u) != 0;
  const auto params = m.named_parameters();
  auto take = [&](const std::string& name, const Shape& shape) -> Tensor {
    auto it = records.find(name);
    require(it != records.end(), what, ": missing tensor '", name, "'");
    require(it->second.shape() == shape, what, ": tensor '", name, "' has shape ", shape_str(it->second.shape()),
            ", expected ", shape_str(shape));
    Tensor t = it->second;
    records.erase(it);
    return t;
  };
  for (const auto& [name, t] : params) {
    auto src = take(name, t.shape());
    auto dst = t;
    auto d = dst.mutable_data();
    auto s = src.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".protect.";
    auto& prot = m.protection[static_cast<std::size_t>(l)];
    auto ranks = [&](const std::string& name) {
      auto t = take(p + name, Shape{cfg.heads});
      std::vector<int> out;
      std::vector<bool> seen(static_cast<std::size_t>(cfg.heads), false);
      for (float v : t.data()) {
        const int k = static_cast<int>(v);
        require(k >= 0 && k < cfg.heads && !seen[static_cast<std::size_t>(k)] && static_cast<float>(k) == v, what,
                ": '", p + name, "' is not a permutation");
        seen[static_cast<std::size_t>(k)] = true;
        out.push_back(k);
      }
      return out;
    };
    prot.head_rank = ranks("head_rank");
    prot.group_rank = ranks("group_rank");
    prot.head = prot.head_rank.front();
    prot.group = prot.group_rank.front();
  }
  if (records.count("adam.m." + params.front().first)) {
    for (const auto& [name, t] : params) {
      ck.state.adam_m.push_back(take("adam.m." + name, t.shape()));
      ck.state.adam_v.push_back(take("adam.v." + name, t.shape()));
    }
  }
  require(records.empty(), what, ": unexpected tensor '", records.empty() ? "" : records.begin()->first, "'");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open checkpoint '", path, "'");
  return read_checkpoint(in, "checkpoint '" + path + "'", expected);
}

}  // namespace dydit
