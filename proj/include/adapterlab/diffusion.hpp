#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "adapterlab/rng.hpp"
#include "adapterlab/tensor.hpp"

namespace adapterlab {

class UNet;
class AdapterBank;

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod alpha_i for t in [1, T].
/// Fractional times interpolate log(alpha_bar) linearly, with alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(std::size_t steps = 1000, double beta_start = 1e-4,
                              double beta_end = 2e-2);

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const;
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const;

  double alpha_bar_at(double t) const;
  double signal(double t) const;  // sqrt(alpha_bar)
  double noise(double t) const;   // sqrt(1 - alpha_bar)
  /// Half log-SNR: log(signal / noise). +inf at t = 0.
  double lambda(double t) const;
  double time_at_lambda(double lambda) const;

 private:
  std::vector<double> betas_;
  std::vector<double> log_alpha_bar_;  // index t, with entry 0 = 0
};

struct SamplerConfig {
  std::size_t steps = 25;
  double cfg_scale = 7.0;
  int order = 2;
  /// Clamp each x0 estimate to [-1, 1] before it enters the update.
  bool clip_x0 = true;
  void validate() const;
};

/// Noise predictor signature shared by the U-Net and analytic oracles.
using NoisePredictor = std::function<Tensor(const Tensor& x_t, double t, const Tensor& c)>;

/// Wraps model + optional adapter bank as a noise predictor,
///   eps(x_t, t, c) = sigma_t x_t + alpha_t F(x_t, t, c),
/// with F the network output. The skip keeps x0_hat = alpha_t x_t - sigma_t F
/// bounded at high noise, where a plain eps head is amplified by 1 / alpha_t.
NoisePredictor model_predictor(const UNet& model, AdapterBank* bank);

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, t in [1, T].
Tensor q_sample(const NoiseSchedule& schedule, const Tensor& x0, std::size_t t, const Tensor& eps);

/// (x_t - sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_bar_t), t in [1, T].
Tensor predicted_x0(const NoiseSchedule& schedule, const Tensor& x_t, std::size_t t,
                    const Tensor& eps_pred);

struct LossSample {
  Tensor loss;  // scalar, recorded on the active tape
  std::size_t t = 0;
};

/// Draws t ~ U{1..T} and eps ~ N(0, I), returns mean((eps_theta(x_t, t, c) - eps)^2).
LossSample training_loss(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                         const Tensor& x0, const Tensor& c, Rng& rng);

/// eps_u + w (eps_c - eps_u); returns eps_c itself when w == 1.
Tensor cfg_noise(const NoisePredictor& predictor, const Tensor& x_t, double t,
                 const Tensor& c_cond, const Tensor& c_uncond, double w);

/// Deterministic exponential-integrator sampler in log-SNR time starting from a
/// seeded Gaussian, written in data-prediction form:
///   x_s = (sigma_s / sigma_t) x_t + alpha_s (1 - e^-h) x0_hat,  h = lambda_s - lambda_t.
/// Order 1 is DDIM. Order 2 re-evaluates x0_hat at the log-SNR midpoint.
/// The final step lands on t = 0, where the update reduces to x0_hat.
/// Returns the terminal state without the final clamp.
Tensor sample_unclamped(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                        const Shape& shape, const Tensor& c_cond, const Tensor& c_uncond,
                        const SamplerConfig& config, std::uint64_t seed);

/// sample_unclamped() clamped to [-1, 1].
Tensor sample(const NoisePredictor& predictor, const NoiseSchedule& schedule, const Shape& shape,
              const Tensor& c_cond, const Tensor& c_uncond, const SamplerConfig& config,
              std::uint64_t seed);

/// Sampler time grid for `steps` steps: T, log-SNR-uniform down to t = 1, then 0.
std::vector<double> sampler_times(const NoiseSchedule& schedule, std::size_t steps);

Tensor clamp_unit(const Tensor& x);

}  // namespace adapterlab
