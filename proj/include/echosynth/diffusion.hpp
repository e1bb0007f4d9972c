#pragma once

#include <torch/torch.h>

#include <functional>

#include "echosynth/schedule.hpp"

namespace echosynth {

// Closed-form marginal of the forward process:
//   x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
torch::Tensor forward_diffuse(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

// Batched variant: t is [B] int64 with one step per batch item, x0 and eps
// are [B, ...]. Row b equals forward_diffuse(x0[b], t[b], eps[b], schedule).
torch::Tensor forward_diffuse_batch(const torch::Tensor& x0, const torch::Tensor& t,
                                    const torch::Tensor& eps, const NoiseSchedule& schedule);

// Applies the single-step transition x_s = sqrt(1 - beta_s) x_{s-1} +
// sqrt(beta_s) eps_s for s = 1..t. Matches forward_diffuse in distribution.
torch::Tensor compose_forward_steps(const torch::Tensor& x0, int64_t t, const NoiseSchedule& schedule,
                                    torch::Generator& gen);

// Mean over all elements of (eps - eps_hat)^2. Differentiable in eps_hat.
torch::Tensor noise_prediction_loss(const torch::Tensor& eps_hat, const torch::Tensor& eps);

enum class ReverseVariance { beta, beta_tilde };

// Posterior mean given the predicted noise:
//   mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
torch::Tensor ddpm_posterior_mean(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat,
                                  const NoiseSchedule& schedule);

// Reverse-step noise scale: sqrt(beta_t), or sqrt(beta_tilde_t) behind the
// flag. Zero at t = 1.
double ddpm_step_sigma(int64_t t, const NoiseSchedule& schedule, ReverseVariance v = ReverseVariance::beta);

// One ancestral step x_t -> x_{t-1}: mu + sigma_t * z with z ~ N(0, I).
torch::Tensor ddpm_sample_step(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat,
                               const NoiseSchedule& schedule, torch::Generator& gen,
                               ReverseVariance v = ReverseVariance::beta);

using DenoiseFn = std::function<torch::Tensor(const torch::Tensor& x_t, int64_t t)>;

// Full ancestral sampler: starts from x_T ~ N(0, I), runs t = T..1 and
// clips the final sample to [-1, 1] (only at the end).
torch::Tensor sample_loop(const DenoiseFn& denoiser, const NoiseSchedule& schedule, torch::IntArrayRef shape,
                          torch::Generator& gen, ReverseVariance v = ReverseVariance::beta);

// Batched sampler with one generator per batch item: item b draws exactly
// the noise sequence it would draw in a solo sample_loop run with gens[b],
// while the denoiser is evaluated once per step on the whole batch.
// item_shape excludes the batch dimension; the result is [B, item_shape...].
torch::Tensor sample_loop_batch(const DenoiseFn& denoiser, const NoiseSchedule& schedule,
                                torch::IntArrayRef item_shape, std::vector<torch::Generator>& gens,
                                ReverseVariance v = ReverseVariance::beta);

}  // namespace echosynth
