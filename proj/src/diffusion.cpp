#include "opama/diffusion.hpp"

#include <cmath>

#include "opama/error.hpp"

namespace opama {

namespace {

void check_t(int t, const NoiseSchedule& sched, int lo, const char* who) {
  if (t < lo || t > sched.T)
    throw ContractError(std::string(who) + ": t=" + std::to_string(t) + " outside [" +
                        std::to_string(lo) + ", " + std::to_string(sched.T) + "]");
}

}  // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ContractError("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ContractError("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double beta =
        T == 1 ? beta_end : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (z0.shape() != eps.shape())
    throw DimensionError("q_sample: z0 " + shape_str(z0.shape()) + " vs eps " +
                         shape_str(eps.shape()));
  check_t(t, sched, 0, "q_sample");
  const double ab = sched.alpha_bar(t);
  return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor eps_loss(const EpsModel& model, const Tensor& z0, int t, const Tensor& eps,
                const NoiseSchedule& sched) {
  check_t(t, sched, 1, "eps_loss");
  Tensor pred = model(q_sample(z0, t, eps, sched), t);
  if (pred.shape() != eps.shape())
    throw DimensionError("eps_loss: model output " + shape_str(pred.shape()) + " vs eps " +
                         shape_str(eps.shape()));
  Tensor diff = sub(eps, pred);
  return mean_all(mul(diff, diff));
}

Tensor ddpm_update(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev,
                   const NoiseSchedule& sched, const Tensor& noise) {
  check_t(t, sched, 1, "ddpm_update");
  if (t_prev < 0 || t_prev >= t) throw ContractError("ddpm_update: need 0 <= t_prev < t");
  if (eps_hat.shape() != z_t.shape() || (t_prev > 0 && noise.shape() != z_t.shape()))
    throw DimensionError("ddpm_update: operand shapes differ from z_t " + shape_str(z_t.shape()));
  const double ab_t = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
  const double alpha = ab_t / ab_prev;
  const double beta = 1.0 - alpha;
  const double coef = beta / std::sqrt(1.0 - ab_t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  Tensor out(z_t.shape());
  auto o = out.data();
  const auto z = z_t.data();
  const auto e = eps_hat.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (z[i] - coef * e[i]) * inv_sqrt_alpha;
  if (t_prev > 0) {
    const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta);
    const auto n = noise.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += sigma * n[i];
  }
  return out;
}

Tensor ddpm_step(const EpsModel& model, const Tensor& z_t, int t, const NoiseSchedule& sched,
                 const Tensor& noise) {
  return ddpm_update(z_t, model(z_t, t), t, t - 1, sched, noise);
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale_factor) {
  if (eps_cond.shape() != eps_uncond.shape())
    throw DimensionError("cfg_combine: " + shape_str(eps_cond.shape()) + " vs " +
                         shape_str(eps_uncond.shape()));
  Tensor out(eps_cond.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = scale_factor * eps_cond[i] + (1.0 - scale_factor) * eps_uncond[i];
  return out;
}

std::vector<int> sample_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw ContractError("sample steps must be in [1, T]");
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i)
    ts.push_back(static_cast<int>(static_cast<long long>(i) * T / steps));
  return ts;
}

Tensor randn(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Tensor sample(const EpsModel& cond, const EpsModel& uncond, const Shape& shape,
              const NoiseSchedule& sched, const SampleOptions& options) {
  TapeScope no_grad(nullptr);
  Rng rng(options.seed);
  Tensor z = randn(shape, rng);
  const auto ts = sample_timesteps(sched.T, options.steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor eps = cond(z, t);
    if (uncond) eps = cfg_combine(eps, uncond(z, t), options.cfg_scale);
    Tensor noise = randn(shape, rng);
    z = ddpm_update(z, eps, t, t_prev, sched, noise);
    if (options.after_step) options.after_step(z, t_prev);
  }
  return z;
}

}  // namespace opama
