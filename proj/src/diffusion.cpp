#include "echosynth/diffusion.hpp"

#include <cmath>

#include "echosynth/errors.hpp"

namespace echosynth {

namespace {

void check_step(int64_t t, const NoiseSchedule& s) {
    if (t < 1 || t > s.T) {
        throw StepOutOfRange("t=" + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
    }
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        throw ShapeMismatch(std::string(what) + ": " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
    }
}

}  // namespace

torch::Tensor forward_diffuse(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
    check_step(t, schedule);
    check_same_shape(x0, eps, "forward_diffuse x0 vs eps");
    const double ab = schedule.alpha_bar_t(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_diffuse_batch(const torch::Tensor& x0, const torch::Tensor& t,
                                    const torch::Tensor& eps, const NoiseSchedule& schedule) {
    check_same_shape(x0, eps, "forward_diffuse_batch x0 vs eps");
    if (t.dim() != 1 || t.size(0) != x0.size(0))
        throw ShapeMismatch("forward_diffuse_batch: t must be [B] matching the batch");
    const int64_t B = t.size(0);
    auto sqrt_ab = torch::empty({B}, torch::kFloat64);
    auto sqrt_1m = torch::empty({B}, torch::kFloat64);
    auto tc = t.contiguous();
    auto* t_ptr = tc.data_ptr<int64_t>();
    auto ab_acc = sqrt_ab.accessor<double, 1>();
    auto m_acc = sqrt_1m.accessor<double, 1>();
    for (int64_t b = 0; b < B; ++b) {
        check_step(t_ptr[b], schedule);
        const double ab = schedule.alpha_bar_t(t_ptr[b]);
        ab_acc[b] = std::sqrt(ab);
        m_acc[b] = std::sqrt(1.0 - ab);
    }
    std::vector<int64_t> bshape(x0.dim(), 1);
    bshape[0] = B;
    auto a = sqrt_ab.to(x0.dtype()).reshape(bshape);
    auto s = sqrt_1m.to(x0.dtype()).reshape(bshape);
    return a * x0 + s * eps;
}

torch::Tensor compose_forward_steps(const torch::Tensor& x0, int64_t t, const NoiseSchedule& schedule,
                                    torch::Generator& gen) {
    check_step(t, schedule);
    auto x = x0;
    for (int64_t s = 1; s <= t; ++s) {
        auto eps = torch::randn(x0.sizes(), gen, x0.options());
        x = std::sqrt(schedule.alpha_t(s)) * x + std::sqrt(schedule.beta_t(s)) * eps;
    }
    return x;
}

torch::Tensor noise_prediction_loss(const torch::Tensor& eps_hat, const torch::Tensor& eps) {
    check_same_shape(eps_hat, eps, "noise_prediction_loss");
    return (eps - eps_hat).pow(2).mean();
}

torch::Tensor ddpm_posterior_mean(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat,
                                  const NoiseSchedule& schedule) {
    check_step(t, schedule);
    check_same_shape(x_t, eps_hat, "ddpm_posterior_mean x_t vs eps_hat");
    const double beta = schedule.beta_t(t);
    const double ab = schedule.alpha_bar_t(t);
    return (x_t - beta / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(schedule.alpha_t(t));
}

double ddpm_step_sigma(int64_t t, const NoiseSchedule& schedule, ReverseVariance v) {
    check_step(t, schedule);
    if (t == 1) return 0.0;
    const double beta = schedule.beta_t(t);
    if (v == ReverseVariance::beta) return std::sqrt(beta);
    const double var = (1.0 - schedule.alpha_bar_t(t - 1)) / (1.0 - schedule.alpha_bar_t(t)) * beta;
    return std::sqrt(var);
}

torch::Tensor ddpm_sample_step(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat,
                               const NoiseSchedule& schedule, torch::Generator& gen, ReverseVariance v) {
    auto mean = ddpm_posterior_mean(x_t, t, eps_hat, schedule);
    const double sigma = ddpm_step_sigma(t, schedule, v);
    if (sigma == 0.0) return mean;
    return mean + sigma * torch::randn(x_t.sizes(), gen, x_t.options());
}

torch::Tensor sample_loop(const DenoiseFn& denoiser, const NoiseSchedule& schedule, torch::IntArrayRef shape,
                          torch::Generator& gen, ReverseVariance v) {
    torch::NoGradGuard no_grad;
    auto x = torch::randn(shape, gen, torch::kFloat32);
    for (int64_t t = schedule.T; t >= 1; --t) {
        auto eps_hat = denoiser(x, t);
        check_same_shape(x, eps_hat, "sample_loop denoiser output");
        x = ddpm_sample_step(x, t, eps_hat, schedule, gen, v);
    }
    return x.clamp(-1.0, 1.0);
}

torch::Tensor sample_loop_batch(const DenoiseFn& denoiser, const NoiseSchedule& schedule,
                                torch::IntArrayRef item_shape, std::vector<torch::Generator>& gens,
                                ReverseVariance v) {
    torch::NoGradGuard no_grad;
    if (gens.empty()) throw ShapeMismatch("sample_loop_batch needs at least one generator");
    auto draw = [&](std::vector<torch::Tensor>& dst) {
        dst.clear();
        for (auto& g : gens) dst.push_back(torch::randn(item_shape, g, torch::kFloat32));
    };
    std::vector<torch::Tensor> z;
    draw(z);
    auto x = torch::stack(z, 0);
    for (int64_t t = schedule.T; t >= 1; --t) {
        auto eps_hat = denoiser(x, t);
        check_same_shape(x, eps_hat, "sample_loop_batch denoiser output");
        auto mean = ddpm_posterior_mean(x, t, eps_hat, schedule);
        const double sigma = ddpm_step_sigma(t, schedule, v);
        if (sigma == 0.0) {
            x = mean;
        } else {
            draw(z);
            x = mean + sigma * torch::stack(z, 0);
        }
    }
    return x.clamp(-1.0, 1.0);
}

}  // namespace echosynth
