#include "adapterlab/diffusion.hpp"

#include <memory>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "adapterlab/adapter.hpp"
#include "adapterlab/ops.hpp"
#include "adapterlab/unet.hpp"

namespace adapterlab {

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw ConfigError("noise schedule betas must satisfy 0 < start <= end < 1");
  }
  NoiseSchedule s;
  s.betas_.resize(steps);
  s.log_alpha_bar_.assign(steps + 1, 0.0);
  for (std::size_t i = 0; i < steps; ++i) {
    s.betas_[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                   static_cast<double>(steps - 1);
    s.log_alpha_bar_[i + 1] = s.log_alpha_bar_[i] + std::log1p(-s.betas_[i]);
  }
  return s;
}

namespace {

void check_step(const NoiseSchedule& s, std::size_t t) {
  if (t < 1 || t > s.steps()) {
    throw ConfigError("timestep " + std::to_string(t) + " outside [1, " +
                      std::to_string(s.steps()) + "]");
  }
}

}  // namespace

double NoiseSchedule::beta(std::size_t t) const {
  check_step(*this, t);
  return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
  check_step(*this, t);
  return std::exp(log_alpha_bar_[t]);
}

double NoiseSchedule::alpha_bar_at(double t) const {
  const double T = static_cast<double>(steps());
  if (!(t >= 0.0 && t <= T)) {
    throw ConfigError("time " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
  }
  const auto lo = static_cast<std::size_t>(std::floor(t));
  if (lo >= steps()) return std::exp(log_alpha_bar_[steps()]);
  const double frac = t - static_cast<double>(lo);
  return std::exp(log_alpha_bar_[lo] + frac * (log_alpha_bar_[lo + 1] - log_alpha_bar_[lo]));
}

double NoiseSchedule::signal(double t) const { return std::sqrt(alpha_bar_at(t)); }

double NoiseSchedule::noise(double t) const { return std::sqrt(1.0 - alpha_bar_at(t)); }

double NoiseSchedule::lambda(double t) const {
  if (t == 0.0) return std::numeric_limits<double>::infinity();
  const double ab = alpha_bar_at(t);
  return 0.5 * (std::log(ab) - std::log1p(-ab));
}

double NoiseSchedule::time_at_lambda(double lam) const {
  double lo = 0.0, hi = static_cast<double>(steps());
  if (lam >= lambda(std::numeric_limits<double>::min())) return 0.0;
  if (lam <= lambda(hi)) return hi;
  for (int i = 0; i < 200 && hi - lo > 1e-12; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (lambda(mid) > lam) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler needs at least one step");
  if (!(cfg_scale >= 0.0)) throw ConfigError("cfg scale must be non-negative");
  if (order != 1 && order != 2) throw ConfigError("sampler order must be 1 or 2");
}

NoisePredictor model_predictor(const UNet& model, AdapterBank* bank) {
  auto schedule = std::make_shared<const NoiseSchedule>(NoiseSchedule::linear(model.config().timesteps));
  return [&model, bank, schedule](const Tensor& x, double t, const Tensor& c) {
    const Tensor f = model.forward(x, t, c, bank);
    return add(scale(x, schedule->noise(t)), scale(f, schedule->signal(t)));
  };
}

Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, std::size_t t,
                const Tensor& eps) {
  const double ab = schedule.alpha_bar(t);
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor predicted_x0(const NoiseSchedule& schedule, const Tensor& x_t, std::size_t t,
                    const Tensor& eps_pred) {
  const double ab = schedule.alpha_bar(t);
  return scale(sub(x_t, scale(eps_pred, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

LossSample training_loss(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                         const Tensor& x0, const Tensor& c, Rng& rng) {
  LossSample out;
  out.t = 1 + static_cast<std::size_t>(rng.index(schedule.steps()));
  const Tensor eps = rng.normal_tensor(x0.shape());
  const Tensor x_t = q_sample(schedule, x0.detach(), out.t, eps);
  const Tensor pred = predictor(x_t, static_cast<double>(out.t), c);
  try {
    out.loss = mse(pred, eps);
  } catch (const NumericError& e) {
    throw NumericError("training loss diverged at t=" + std::to_string(out.t) + ": " + e.what());
  }
  return out;
}

Tensor cfg_noise(const NoisePredictor& predictor, const Tensor& x_t, double t,
                 const Tensor& c_cond, const Tensor& c_uncond, double w) {
  const Tensor e_c = predictor(x_t, t, c_cond);
  if (w == 1.0) return e_c;
  const Tensor e_u = predictor(x_t, t, c_uncond);
  if (w == 0.0) return e_u;
  return add(e_u, scale(sub(e_c, e_u), w));
}

std::vector<double> sampler_times(const NoiseSchedule& schedule, std::size_t steps) {
  if (steps < 1) throw ConfigError("sampler needs at least one step");
  const double T = static_cast<double>(schedule.steps());
  std::vector<double> times;
  if (steps == 1) return {T, 0.0};
  const double l0 = schedule.lambda(T), l1 = schedule.lambda(1.0);
  for (std::size_t i = 0; i < steps; ++i) {
    if (i == 0) {
      times.push_back(T);
    } else if (i + 1 == steps) {
      times.push_back(1.0);
    } else {
      const double lam = l0 + (l1 - l0) * static_cast<double>(i) / static_cast<double>(steps - 1);
      times.push_back(schedule.time_at_lambda(lam));
    }
  }
  times.push_back(0.0);
  return times;
}

namespace {

Tensor clamp_values(const Tensor& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e = std::clamp(e, -1.0, 1.0);
  return Tensor(x.shape(), std::move(v));
}

/// x0_hat = (x_t - sigma_t eps) / alpha_t, optionally clipped.
Tensor data_estimate(const NoiseSchedule& sch, const Tensor& x, double t, const Tensor& eps,
                     bool clip) {
  const Tensor x0 = scale(sub(x, scale(eps, sch.noise(t))), 1.0 / sch.signal(t));
  return clip ? clamp_values(x0) : x0;
}

Tensor exponential_step(const NoiseSchedule& sch, const Tensor& x, double t, double s,
                        const Tensor& x0) {
  if (s == 0.0) return x0;
  const double h = sch.lambda(s) - sch.lambda(t);
  return add(scale(x, sch.noise(s) / sch.noise(t)), scale(x0, -sch.signal(s) * std::expm1(-h)));
}

}  // namespace

Tensor sample_unclamped(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                        const Shape& shape, const Tensor& c_cond, const Tensor& c_uncond,
                        const SamplerConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Tensor x = rng.normal_tensor(shape);
  const auto times = sampler_times(schedule, config.steps);
  auto x0_at = [&](const Tensor& xt, double t) {
    const Tensor eps = cfg_noise(predictor, xt, t, c_cond, c_uncond, config.cfg_scale);
    return data_estimate(schedule, xt, t, eps, config.clip_x0);
  };
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    const double t = times[i], s = times[i + 1];
    try {
      const Tensor x0 = x0_at(x, t);
      if (config.order == 1 || s == 0.0) {
        x = exponential_step(schedule, x, t, s, x0);
      } else {
        const double mid = schedule.time_at_lambda(0.5 * (schedule.lambda(t) + schedule.lambda(s)));
        const Tensor u = exponential_step(schedule, x, t, mid, x0);
        x = exponential_step(schedule, x, t, s, x0_at(u, mid));
      }
    } catch (const NumericError& e) {
      throw NumericError("sampler diverged at step " + std::to_string(i) + " (t=" +
                         std::to_string(t) + "): " + e.what());
    }
  }
  return x;
}

Tensor clamp_unit(const Tensor& x) { return clamp_values(x); }

Tensor sample(const NoisePredictor& predictor, const NoiseSchedule& schedule, const Shape& shape,
              const Tensor& c_cond, const Tensor& c_uncond, const SamplerConfig& config,
              std::uint64_t seed) {
  return clamp_unit(sample_unclamped(predictor, schedule, shape, c_cond, c_uncond, config, seed));
}

}  // namespace adapterlab
