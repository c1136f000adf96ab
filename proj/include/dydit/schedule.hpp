#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dydit/dit.hpp"
#include "dydit/model.hpp"
#include "dydit/routing.hpp"
#include "dydit/slicing.hpp"

namespace dydit {

namespace detail {

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  template <typename V>
  void value(const V& v) {
    bytes(&v, sizeof(V));
  }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace detail

/// Identity of a (config, weights) pair: FNV-1a over the configuration and
/// every parameter's name and float32 bytes, as 16 hex digits.
template <typename T>
std::string model_fingerprint(const DitModel<T>& model) {
  detail::Fnv1a h;
  const auto& c = model.config;
  for (int v : {c.layers, c.channels, c.heads, c.patch, c.extent, c.channels_in, c.classes, c.freq_dim, model.diffusion.T})
    h.value(static_cast<std::int32_t>(v));
  h.value(model.diffusion.beta_start);
  h.value(model.diffusion.beta_end);
  for (const auto& [name, t] : model.named_parameters()) {
    h.bytes(name.data(), name.size());
    for (T v : t.data()) h.value(static_cast<float>(v));
  }
  for (const auto& p : model.protection) {
    h.value(static_cast<std::int32_t>(p.head));
    h.value(static_cast<std::int32_t>(p.group));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.digest()));
  return buf;
}

using BitMask = std::vector<std::uint8_t>;

struct LayerWidth {
  BitMask head;
  BitMask channel;
  bool operator==(const LayerWidth&) const = default;
};

/// Per-timestep width masks for every layer, compiled offline. Token masks
/// are not part of it: they depend on the input at run time.
struct ArchitectureSchedule {
  std::string fingerprint;
  int T = 0;
  int layers = 0;
  int heads = 0;
  std::vector<int> timesteps;                    // sampler order, strictly decreasing
  std::vector<std::vector<LayerWidth>> widths;  // [step][layer]

  std::size_t index_of(int t) const {
    for (std::size_t i = 0; i < timesteps.size(); ++i)
      if (timesteps[i] == t) return i;
    fail("schedule has no entry for timestep ", t);
  }
  const std::vector<LayerWidth>& at(int t) const { return widths[index_of(t)]; }

  bool operator==(const ArchitectureSchedule&) const = default;
};

/// Evaluates the width routers (eval mode, with protection) at each sampler
/// timestep.
template <typename T>
ArchitectureSchedule compile_schedule(const DitModel<T>& model, const std::vector<int>& timesteps) {
  require(!timesteps.empty(), "compile_schedule: empty timestep list");
  for (std::size_t i = 1; i < timesteps.size(); ++i)
    require(timesteps[i] < timesteps[i - 1], "compile_schedule: timesteps must be strictly decreasing");
  NoGradGuard no_grad;
  ArchitectureSchedule s;
  s.fingerprint = model_fingerprint(model);
  s.T = model.diffusion.T;
  s.layers = model.config.layers;
  s.heads = model.config.heads;
  s.timesteps = timesteps;
  s.widths.resize(timesteps.size());
  auto e_t = timestep_embed(model, timesteps);
  const int steps = static_cast<int>(timesteps.size());
  for (int l = 0; l < model.config.layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    auto d = route_width(e_t, model.routers[li], model.protection[li], RouteMode::kEval, 1.0, nullptr);
    for (int i = 0; i < steps; ++i) s.widths[static_cast<std::size_t>(i)].push_back({d.head_row(i), d.channel_row(i)});
  }
  return s;
}

namespace detail {

inline std::string to_hex(const BitMask& mask) {
  const std::size_t digits = (mask.size() + 3) / 4;
  std::string out(digits, '0');
  for (std::size_t d = 0; d < digits; ++d) {
    int nibble = 0;
    for (std::size_t b = 0; b < 4; ++b) {
      const std::size_t bit = d * 4 + b;
      if (bit < mask.size() && mask[bit]) nibble |= 1 << b;
    }
    out[digits - 1 - d] = "0123456789abcdef"[nibble];
  }
  return out;
}

inline BitMask from_hex(const std::string& hex, int bits) {
  require(hex.size() == static_cast<std::size_t>((bits + 3) / 4), "expected ", (bits + 3) / 4, " hex digits, got '",
          hex, "'");
  BitMask mask(static_cast<std::size_t>(bits), 0);
  const std::size_t digits = hex.size();
  for (std::size_t d = 0; d < digits; ++d) {
    const char ch = hex[digits - 1 - d];
    int nibble;
    if (ch >= '0' && ch <= '9')
      nibble = ch - '0';
    else if (ch >= 'a' && ch <= 'f')
      nibble = ch - 'a' + 10;
    else
      fail("invalid hex digit '", ch, "'");
    for (std::size_t b = 0; b < 4; ++b) {
      const std::size_t bit = d * 4 + b;
      if (nibble & (1 << b)) {
        require(bit < mask.size(), "hex value '", hex, "' sets bit ", bit, " beyond ", bits, " entries");
        mask[bit] = 1;
      }
    }
  }
  return mask;
}

}  // namespace detail

inline constexpr const char* kScheduleMagic = "DYDIT-SCHEDULE";
inline constexpr const char* kScheduleVersion = "v1";

// Header: "DYDIT-SCHEDULE v1 <fingerprint> T=<n>" with n the diffusion length,
// then one "t=<int> layer=<int> head=<hex> channel=<hex>" line per
// (timestep, layer) in sampler order. Bit h of a mask is bit h of the hex
// number (head 0 is the least significant bit).
inline void write_schedule(const ArchitectureSchedule& s, std::ostream& os) {
  os << kScheduleMagic << ' ' << kScheduleVersion << ' ' << s.fingerprint << " T=" << s.T << '\n';
  for (std::size_t i = 0; i < s.timesteps.size(); ++i)
    for (std::size_t l = 0; l < s.widths[i].size(); ++l)
      os << "t=" << s.timesteps[i] << " layer=" << l << " head=" << detail::to_hex(s.widths[i][l].head)
         << " channel=" << detail::to_hex(s.widths[i][l].channel) << '\n';
}

inline void serialize_schedule(const ArchitectureSchedule& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot write schedule to '", path, "'");
  write_schedule(s, out);
  require(static_cast<bool>(out), "failed writing schedule to '", path, "'");
}

/// Parses a schedule for a model with `heads` heads. When `expected_fingerprint`
/// is non-empty the header must match it.
inline ArchitectureSchedule read_schedule(std::istream& is, int heads, const std::string& expected_fingerprint = "") {
  ArchitectureSchedule s;
  s.heads = heads;
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "schedule parse error at line 1: missing header");
  {
    std::istringstream hs(line);
    std::string magic, version, fp, tfield;
    hs >> magic >> version >> fp >> tfield;
    require(magic == kScheduleMagic, "schedule parse error at line 1: bad magic '", magic, "'");
    require(version == kScheduleVersion, "schedule version mismatch: file has '", version, "', expected '",
            kScheduleVersion, "'");
    require(tfield.rfind("T=", 0) == 0, "schedule parse error at line 1: missing T=<n>");
    s.fingerprint = fp;
    s.T = std::stoi(tfield.substr(2));
  }
  if (!expected_fingerprint.empty())
    require(s.fingerprint == expected_fingerprint, "schedule fingerprint mismatch: file ", s.fingerprint, ", model ",
            expected_fingerprint);
  int lineno = 1;
  int max_layer = -1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    int t = 0;
    int layer = 0;
    char head[64] = {0};
    char channel[64] = {0};
    const int got = std::sscanf(line.c_str(), "t=%d layer=%d head=%63s channel=%63s", &t, &layer, head, channel);
    require(got == 4, "schedule parse error at line ", lineno, ": '", line, "'");
    if (s.timesteps.empty() || s.timesteps.back() != t) {
      require(layer == 0, "schedule parse error at line ", lineno, ": timestep ", t, " does not start at layer 0");
      require(s.timesteps.empty() || t < s.timesteps.back(), "schedule parse error at line ", lineno,
              ": timesteps must be strictly decreasing");
      s.timesteps.push_back(t);
      s.widths.emplace_back();
    }
    require(layer == static_cast<int>(s.widths.back().size()), "schedule parse error at line ", lineno,
            ": expected layer ", s.widths.back().size(), ", got ", layer);
    s.widths.back().push_back({detail::from_hex(head, heads), detail::from_hex(channel, heads)});
    max_layer = std::max(max_layer, layer);
  }
  require(!s.timesteps.empty(), "schedule parse error: no entries");
  s.layers = max_layer + 1;
  for (std::size_t i = 0; i < s.widths.size(); ++i)
    require(static_cast<int>(s.widths[i].size()) == s.layers, "schedule parse error: timestep ", s.timesteps[i],
            " has ", s.widths[i].size(), " layers, expected ", s.layers, " (truncated file?)");
  return s;
}

inline ArchitectureSchedule deserialize_schedule(const std::string& path, int heads,
                                                 const std::string& expected_fingerprint = "") {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open schedule '", path, "'");
  return read_schedule(in, heads, expected_fingerprint);
}

/// Sliced weights for every (timestep, layer) of a schedule, materialized
/// once per load.
template <typename T>
class SliceCache {
 public:
  SliceCache(const DitModel<T>& model, const ArchitectureSchedule& schedule) {
    for (std::size_t i = 0; i < schedule.timesteps.size(); ++i) {
      std::vector<SlicedBlock<T>> layers;
      for (int l = 0; l < model.config.layers; ++l) {
        const auto& w = schedule.widths[i][static_cast<std::size_t>(l)];
        layers.push_back(slice_block(model.blocks[static_cast<std::size_t>(l)], model.config, w.head, w.channel));
      }
      slices_.emplace(schedule.timesteps[i], std::move(layers));
    }
  }
  const std::vector<SlicedBlock<T>>& at(int t) const {
    auto it = slices_.find(t);
    require(it != slices_.end(), "slice cache has no entry for timestep ", t);
    return it->second;
  }

 private:
  std::map<int, std::vector<SlicedBlock<T>>> slices_;
};

/// Width from a compiled schedule at the current timestep; tokens from the
/// model's token routers in eval mode.
template <typename T>
class ScheduledRouting : public RoutingPolicy<T> {
 public:
  ScheduledRouting(const DitModel<T>& model, const ArchitectureSchedule& schedule, const SliceCache<T>* cache = nullptr)
      : model_(model), schedule_(schedule), cache_(cache) {}

  void set_timestep(int t) {
    t_ = t;
    current_ = &schedule_.at(t);
    sliced_ = cache_ ? &cache_->at(t) : nullptr;
  }

  WidthDecision<T> width(int layer, const BasicTensor<T>& e_t) override {
    require(current_ != nullptr, "ScheduledRouting: set_timestep was not called");
    const auto& w = (*current_)[static_cast<std::size_t>(layer)];
    return fixed_width<T>(static_cast<int>(e_t.dim(0)), w.head, w.channel);
  }
  TokenDecision<T> tokens(int layer, const BasicTensor<T>& x, int batch) override {
    return route_tokens(x, model_.routers[static_cast<std::size_t>(layer)], RouteMode::kEval, 1.0, nullptr, batch);
  }
  const SlicedBlock<T>* sliced(int layer) const override {
    return sliced_ ? &(*sliced_)[static_cast<std::size_t>(layer)] : nullptr;
  }

 private:
  const DitModel<T>& model_;
  const ArchitectureSchedule& schedule_;
  const SliceCache<T>* cache_;
  int t_ = -1;
  const std::vector<LayerWidth>* current_ = nullptr;
  const std::vector<SlicedBlock<T>>* sliced_ = nullptr;
};

}  // namespace dydit
