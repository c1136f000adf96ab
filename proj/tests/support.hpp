#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dydit/dydit.hpp"

namespace dydit::testing {

template <typename T = float>
BasicTensor<T> randn(Rng& rng, Shape shape, double stddev = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T = float>
BasicTensor<T> leaf(Rng& rng, Shape shape, double stddev = 1.0) {
  auto t = randn<T>(rng, std::move(shape), stddev);
  t.set_requires_grad(true);
  return t;
}

// max |a - b| / max |b|: relative to the reference's scale, so entries that
// happen to be near zero do not dominate.
template <typename A, typename B>
double max_rel_err(const A& a, const B& b) {
  const auto x = a.data();
  const auto y = b.data();
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(x[i]) - static_cast<double>(y[i])));
    scale = std::max(scale, std::abs(static_cast<double>(y[i])));
  }
  return diff / std::max(scale, 1e-30);
}

template <typename A, typename B>
bool bit_equal(const A& a, const B& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data();
  const auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

inline std::vector<std::uint8_t> random_mask(Rng& rng, int n, double p_on = 0.5, bool nonempty = false) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
  for (auto& v : m) v = rng.uniform() < p_on ? 1 : 0;
  if (nonempty && std::count(m.begin(), m.end(), 1) == 0) m[static_cast<std::size_t>(rng.integer(0, n - 1))] = 1;
  return m;
}

inline ModelConfig toy_config() {
  ModelConfig c;
  c.layers = 2;
  c.channels = 64;
  c.heads = 4;
  c.patch = 4;
  c.extent = 16;
  c.channels_in = 3;
  c.classes = 4;
  c.freq_dim = 64;
  return c;
}

inline ModelConfig tiny_config(int layers = 1, int channels = 16, int heads = 2) {
  ModelConfig c;
  c.layers = layers;
  c.channels = channels;
  c.heads = heads;
  c.patch = 2;
  c.extent = 4;
  c.channels_in = 1;
  c.classes = 3;
  c.freq_dim = 8;
  return c;
}

inline DiffusionConfig toy_diffusion() {
  DiffusionConfig d;
  d.T = 100;
  d.beta_start = 0.001;
  d.beta_end = 0.2;
  return d;
}

// Overwrites every parameter, including the zero-initialized adaLN and output
// head, with random values so no branch is trivially zero.
template <typename T>
void randomize(DitModel<T>& m, std::uint64_t seed, double stddev = 0.3) {
  Rng rng(seed);
  for (auto& [name, p] : m.named_parameters()) {
    if (name.find(".router.") != std::string::npos) continue;
    auto d = p.mutable_data();
    for (auto& v : d) v = static_cast<T>(rng.normal() * stddev);
  }
}

template <typename T>
DitModel<T> random_model(const ModelConfig& cfg, std::uint64_t seed, const DiffusionConfig& diff = toy_diffusion()) {
  auto m = init_model<T>(cfg, diff, seed);
  randomize(m, seed + 1);
  return m;
}

template <typename T = float>
BasicTensor<T> random_images(Rng& rng, const ModelConfig& cfg, int batch) {
  return randn<T>(rng, {batch, cfg.channels_in, cfg.extent, cfg.extent});
}

inline std::vector<int> random_timesteps(Rng& rng, int batch, int T) {
  std::vector<int> ts(static_cast<std::size_t>(batch));
  for (auto& t : ts) t = static_cast<int>(rng.integer(1, T));
  return ts;
}

inline std::vector<int> random_labels(Rng& rng, int batch, int classes) {
  std::vector<int> ys(static_cast<std::size_t>(batch));
  for (auto& y : ys) y = static_cast<int>(rng.integer(0, classes));  // classes is the null label
  return ys;
}

}  // namespace dydit::testing
