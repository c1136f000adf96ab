#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dydit/primitives.hpp"
#include "dydit/tensor.hpp"

namespace dydit {

struct DiffusionConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  bool operator==(const DiffusionConfig&) const = default;
};

/// Linear-beta noise schedule. Timesteps are 1-based; index 0 holds the
/// clean-data sentinel alpha_bar(0) = 1.
class DiffusionSchedule {
 public:
  DiffusionSchedule() = default;

  int T() const { return T_; }
  const DiffusionConfig& config() const { return config_; }

  double beta(int t) const { return beta_[checked(t)]; }
  double alpha(int t) const { return 1.0 - beta_[checked(t)]; }
  double alpha_bar(int t) const {
    require(t >= 0 && t <= T_, "timestep ", t, " outside [0, ", T_, "]");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }
  double posterior_var(int t) const { return posterior_var_[checked(t)]; }

  friend DiffusionSchedule build_schedule(int T, double beta_start, double beta_end);

 private:
  std::size_t checked(int t) const {
    require(t >= 1 && t <= T_, "timestep ", t, " outside [1, ", T_, "]");
    return static_cast<std::size_t>(t);
  }

  int T_ = 0;
  DiffusionConfig config_;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> posterior_var_;
};

inline DiffusionSchedule build_schedule(int T, double beta_start, double beta_end) {
  require(T >= 2, "build_schedule: T must be >= 2, got ", T);
  require(beta_start > 0 && beta_start <= beta_end && beta_end < 1, "build_schedule: need 0 < beta_start <= beta_end < 1, got ",
          beta_start, ", ", beta_end);
  DiffusionSchedule s;
  s.T_ = T;
  s.config_ = {T, beta_start, beta_end};
  s.beta_.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_bar_.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.posterior_var_.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.beta_[i] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.alpha_bar_[i] = s.alpha_bar_[i - 1] * (1.0 - s.beta_[i]);
    s.posterior_var_[i] = t == 1 ? s.beta_[i] : s.beta_[i] * (1.0 - s.alpha_bar_[i - 1]) / (1.0 - s.alpha_bar_[i]);
  }
  return s;
}

inline DiffusionSchedule build_schedule(const DiffusionConfig& c) { return build_schedule(c.T, c.beta_start, c.beta_end); }

namespace detail {

template <typename T>
void expect_same(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

}  // namespace detail

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, int t, const BasicTensor<T>& eps, const DiffusionSchedule& sched) {
  detail::expect_same("q_sample", x0, eps);
  require(t >= 1 && t <= sched.T(), "q_sample: timestep ", t, " outside [1, ", sched.T(), "]");
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  BasicTensor<T> out(x0.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Per-sample timesteps: the leading axis of x0 indexes samples.
template <typename T>
BasicTensor<T> q_sample(const BasicTensor<T>& x0, std::span<const int> ts, const BasicTensor<T>& eps,
                        const DiffusionSchedule& sched) {
  detail::expect_same("q_sample", x0, eps);
  require(x0.rank() >= 1 && x0.dim(0) == static_cast<std::int64_t>(ts.size()), "q_sample: ", ts.size(),
          " timesteps for batch shape ", shape_str(x0.shape()));
  BasicTensor<T> out(x0.shape());
  auto o = out.mutable_data();
  const std::size_t per = ts.empty() ? 0 : o.size() / ts.size();
  for (std::size_t b = 0; b < ts.size(); ++b) {
    require(ts[b] >= 1 && ts[b] <= sched.T(), "q_sample: timestep ", ts[b], " outside [1, ", sched.T(), "]");
    const double ab = sched.alpha_bar(ts[b]);
    const T a = static_cast<T>(std::sqrt(ab));
    const T c = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) o[i] = a * x0[i] + c * eps[i];
  }
  return out;
}

/// One ancestral DDPM step t -> t-1 with the fixed posterior variance.
template <typename T>
BasicTensor<T> ddpm_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, int t,
                         const DiffusionSchedule& sched, const BasicTensor<T>& z) {
  require(t >= 1 && t <= sched.T(), "ddpm_step: timestep ", t, " outside [1, ", sched.T(), "]");
  detail::expect_same("ddpm_step", x_t, eps_hat);
  detail::expect_same("ddpm_step", x_t, z);
  if (t == 1) {
    for (T v : z.data()) require(v == T(0), "ddpm_step: noise must be zero at t = 1");
  }
  const double beta = sched.beta(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sigma = std::sqrt(sched.posterior_var(t));
  BasicTensor<T> out(x_t.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double mu = (x_t[i] - coef * eps_hat[i]) * inv_sqrt_alpha;
    o[i] = static_cast<T>(mu + sigma * z[i]);
  }
  return out;
}

/// DDPM step across a respaced gap t -> t_prev. With t_prev = t - 1 this is
/// exactly ddpm_step; the final step into t_prev = 0 adds no noise.
template <typename T>
BasicTensor<T> ddpm_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, int t, int t_prev,
                         const DiffusionSchedule& sched, const BasicTensor<T>& z) {
  require(t_prev >= 0 && t_prev < t, "ddpm_step: need 0 <= t_prev < t, got t=", t, " t_prev=", t_prev);
  if (t_prev == t - 1) {
    if (t == 1) return ddpm_step(x_t, eps_hat, t, sched, zeros_like(z));
    return ddpm_step(x_t, eps_hat, t, sched, z);
  }
  detail::expect_same("ddpm_step", x_t, eps_hat);
  detail::expect_same("ddpm_step", x_t, z);
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double alpha = ab / ab_prev;
  const double beta = 1.0 - alpha;
  const double var = t_prev == 0 ? 0.0 : beta * (1.0 - ab_prev) / (1.0 - ab);
  const double coef = beta / std::sqrt(1.0 - ab);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double sigma = std::sqrt(var);
  BasicTensor<T> out(x_t.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double mu = (x_t[i] - coef * eps_hat[i]) * inv_sqrt_alpha;
    o[i] = static_cast<T>(mu + sigma * z[i]);
  }
  return out;
}

/// DDIM update t -> t_prev. eta = 0 is deterministic; for eta > 0 pass the
/// fresh noise in `z`.
template <typename T>
BasicTensor<T> ddim_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, int t, int t_prev,
                         const DiffusionSchedule& sched, double eta, const BasicTensor<T>* z = nullptr) {
  require(t_prev < t, "ddim_step: t_prev (", t_prev, ") must be < t (", t, ")");
  require(t_prev >= 0 && t <= sched.T(), "ddim_step: timesteps outside [0, ", sched.T(), "]");
  require(eta >= 0 && eta <= 1, "ddim_step: eta must be in [0, 1], got ", eta);
  detail::expect_same("ddim_step", x_t, eps_hat);
  require(eta == 0 || z != nullptr, "ddim_step: eta > 0 needs a noise tensor");
  if (z) detail::expect_same("ddim_step", x_t, *z);
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sqrt_ab = std::sqrt(ab);
  const double sqrt_1m_ab = std::sqrt(1.0 - ab);
  const double sqrt_ab_prev = std::sqrt(ab_prev);
  BasicTensor<T> out(x_t.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x0 = (x_t[i] - sqrt_1m_ab * eps_hat[i]) / sqrt_ab;
    double v = sqrt_ab_prev * x0 + dir * eps_hat[i];
    if (sigma > 0) v += sigma * (*z)[i];
    o[i] = static_cast<T>(v);
  }
  return out;
}

/// eps_uncond + w * (eps_cond - eps_uncond)
template <typename T>
BasicTensor<T> cfg_combine(const BasicTensor<T>& eps_cond, const BasicTensor<T>& eps_uncond, double w) {
  detail::expect_same("cfg_combine", eps_cond, eps_uncond);
  BasicTensor<T> out(eps_cond.shape());
  auto o = out.mutable_data();
  // w*c + (1-w)*u: exact at w = 0 and w = 1.
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(w * eps_cond[i] + (1.0 - w) * eps_uncond[i]);
  return out;
}

/// Mean squared error; differentiable through eps_hat.
template <typename T>
BasicTensor<T> diffusion_loss(const BasicTensor<T>& eps_hat, const BasicTensor<T>& eps) {
  detail::expect_same("diffusion_loss", eps_hat, eps);
  return mean(square(sub(eps_hat, eps)));
}

/// Strictly decreasing sampler timesteps: `steps` evenly strided values in
/// [1, T]. steps == T visits every timestep.
inline std::vector<int> sampler_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, "sampler_timesteps: steps must be in [1, ", T, "], got ", steps);
  std::vector<int> ts;
  for (int i = steps - 1; i >= 0; --i)
    ts.push_back(1 + static_cast<int>(static_cast<std::int64_t>(i) * T / steps));
  return ts;
}

}  // namespace dydit
