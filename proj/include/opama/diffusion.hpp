#pragma once

#include <functional>
#include <vector>

#include "opama/rng.hpp"
#include "opama/tensor.hpp"

namespace opama {

/// Linear beta schedule over T steps. Timesteps are 1-based: t in [1, T];
/// alpha_bar(0) = 1 denotes clean data.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // [T], betas[t-1] = beta_t
  std::vector<double> alphas;      // [T]
  std::vector<double> alpha_bars;  // [T]

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const {
    return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1));
  }
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. t = 0 returns z0.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// Noise predictor eps_theta(z_t, t) with its conditions bound in.
using EpsModel = std::function<Tensor(const Tensor& z_t, int t)>;

/// mean((eps - model(q_sample(z0, t, eps), t))^2); differentiable.
Tensor eps_loss(const EpsModel& model, const Tensor& z0, int t, const Tensor& eps,
                const NoiseSchedule& sched);

/// Ancestral update from t to t_prev < t given the predicted noise. With
/// t_prev = t - 1 this is the standard DDPM step
///   mu = (z_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)
///   z_{t-1} = mu + sigma_t noise,  sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) beta_t
/// Strided steps use the effective alpha = alpha_bar_t / alpha_bar_{t_prev}.
/// No noise is added when t_prev == 0.
Tensor ddpm_update(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev,
                   const NoiseSchedule& sched, const Tensor& noise);

/// Calls the model and applies ddpm_update with t_prev = t - 1.
Tensor ddpm_step(const EpsModel& model, const Tensor& z_t, int t, const NoiseSchedule& sched,
                 const Tensor& noise);

/// eps_uncond + scale (eps_cond - eps_uncond), evaluated as
/// scale * eps_cond + (1 - scale) * eps_uncond so scale 1 and 0 are exact.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

/// Evenly strided descending timesteps ending at 1; steps == T gives T..1.
std::vector<int> sample_timesteps(int T, int steps);

struct SampleOptions {
  int steps = 25;
  double cfg_scale = 2.5;
  std::uint64_t seed = 0;
  /// Called after every update with the new latent and its timestep.
  std::function<void(Tensor& z, int t_prev)> after_step;
};

/// Ancestral sampling loop from z_T ~ N(0, I). `uncond` may be empty, in
/// which case no guidance is applied.
Tensor sample(const EpsModel& cond, const EpsModel& uncond, const Shape& shape,
              const NoiseSchedule& sched, const SampleOptions& options);

Tensor randn(const Shape& shape, Rng& rng);

}  // namespace opama
