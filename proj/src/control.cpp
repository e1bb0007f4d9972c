#include "echosynth/control.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

namespace F = torch::nn::functional;

namespace {

torch::Tensor gaussian_kernel1d(double sigma) {
    const int64_t radius = static_cast<int64_t>(std::ceil(4.0 * sigma));
    auto x = torch::arange(-radius, radius + 1, torch::kFloat64);
    auto k = torch::exp(-(x * x) / (2.0 * sigma * sigma));
    return (k / k.sum()).to(torch::kFloat32);
}

// Separable Gaussian blur over the last two dims of [N, 1, H, W],
// reflect-padded so edges are not darkened.
torch::Tensor gaussian_blur(const torch::Tensor& img, double sigma) {
    auto k = gaussian_kernel1d(sigma);
    const int64_t r = (k.size(0) - 1) / 2;
    auto kh = k.reshape({1, 1, 1, k.size(0)});
    auto kv = k.reshape({1, 1, k.size(0), 1});
    auto h = F::pad(img, F::PadFuncOptions({r, r, 0, 0}).mode(torch::kReflect));
    h = F::conv2d(h, kh);
    h = F::pad(h, F::PadFuncOptions({0, 0, r, r}).mode(torch::kReflect));
    return F::conv2d(h, kv);
}

}  // namespace

torch::Tensor motion_mask(const torch::Tensor& frames, double sigma) {
    if (frames.dim() != 4) throw ShapeMismatch("motion_mask expects frames [T, C, H, W]");
    const int64_t T = frames.size(0);
    if (T < 1) throw ShapeMismatch("motion_mask needs at least one frame");
    auto first = torch::zeros({1, 1, frames.size(2), frames.size(3)}, frames.options());
    if (T == 1) return first;
    auto diff = (frames.slice(0, 1, T) - frames.slice(0, 0, T - 1)).abs().mean(/*dim=*/1, /*keepdim=*/true);
    auto mask = torch::cat({first, gaussian_blur(diff, sigma)}, /*dim=*/0);
    return (mask / 2.0).clamp(0.0, 1.0);
}

torch::Tensor make_condition(const torch::Tensor& a4c_frames) {
    auto mask = motion_mask(a4c_frames);
    auto stacked = torch::cat({a4c_frames, mask}, /*dim=*/1);  // [T, 2, H, W]
    return stacked.permute({1, 0, 2, 3}).unsqueeze(0).contiguous();
}

ControlNetBranchImpl::ControlNetBranchImpl(const UNetConfig& cfg, int64_t cond_channels)
    : cfg_(cfg), cond_channels_(cond_channels) {
    validate_config(cfg);
    if (cond_channels < 1) throw InvalidConfig("cond_channels must be >= 1");
    namespace nn = torch::nn;
    time_mlp_ = register_module("time_mlp", TimeMlp(cfg.base_channels, cfg.time_embed_dim));
    encoder_ = register_module("encoder", UNetEncoder(cfg));
    cond_entry = register_module(
        "cond_entry", nn::Conv3d(nn::Conv3dOptions(cond_channels, cfg.channels_at(0), 3)
                                     .stride({1, cfg.stem_stride, cfg.stem_stride})
                                     .padding(1)));
    for (int64_t lvl = 0; lvl < cfg.levels; ++lvl) {
        const int64_t ch = cfg.channels_at(lvl);
        auto zc = nn::Conv3d(nn::Conv3dOptions(ch, ch, 1));
        register_module("zero_skip" + std::to_string(lvl), zc);
        zero_skips_.push_back(zc);
    }
    const int64_t mid_ch = cfg.channels_at(cfg.levels - 1);
    zero_mid = register_module("zero_mid", torch::nn::Conv3d(torch::nn::Conv3dOptions(mid_ch, mid_ch, 1)));

    // All bridges start at exactly zero so attaching the branch is a no-op.
    torch::NoGradGuard guard;
    for (auto conv : {cond_entry, zero_mid}) {
        conv->weight.zero_();
        conv->bias.zero_();
    }
    for (auto& conv : zero_skips_) {
        conv->weight.zero_();
        conv->bias.zero_();
    }
}

ControlResiduals ControlNetBranchImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                               const torch::Tensor& cond) {
    if (cond.dim() != 5 || cond.size(0) != x.size(0) || cond.size(1) != cond_channels_ ||
        cond.size(2) != cfg_.frames || cond.size(3) != cfg_.input_size ||
        cond.size(4) != cfg_.input_size)
        throw ShapeMismatch("condition stack does not match the configured geometry");
    auto tt = t.dim() == 0 ? t.reshape({1}).expand({x.size(0)}) : t;
    auto temb = time_mlp_->forward(tt, x.options());
    auto inject = cond_entry(cond);
    auto enc = encoder_->forward(x, temb, inject);
    ControlResiduals res;
    for (int64_t lvl = 0; lvl < cfg_.levels; ++lvl)
        res.per_level.push_back(zero_skips_[lvl](enc.skips[lvl]));
    res.middle = zero_mid(enc.middle);
    return res;
}

void copy_module_state(const torch::nn::Module& src, torch::nn::Module& dst) {
    torch::NoGradGuard guard;
    auto src_params = src.named_parameters();
    auto dst_params = dst.named_parameters();
    if (src_params.size() != dst_params.size())
        throw BranchMismatch("parameter lists differ in length");
    for (const auto& item : src_params) {
        auto* target = dst_params.find(item.key());
        if (!target) throw BranchMismatch("missing parameter " + item.key());
        if (!target->sizes().equals(item.value().sizes()))
            throw BranchMismatch("shape mismatch for parameter " + item.key());
        target->copy_(item.value());
    }
    auto src_bufs = src.named_buffers();
    auto dst_bufs = dst.named_buffers();
    for (const auto& item : src_bufs) {
        auto* target = dst_bufs.find(item.key());
        if (!target) throw BranchMismatch("missing buffer " + item.key());
        target->copy_(item.value());
    }
}

ControlNetBranch make_control_branch(DenoiserNet& host, int64_t cond_channels, uint64_t seed) {
    torch::manual_seed(seed);
    ControlNetBranch branch(host->config(), cond_channels);
    copy_module_state(*host->encoder(), *branch->encoder());
    copy_module_state(*host->time_mlp(), *branch->time_mlp());
    return branch;
}

torch::Tensor conditional_forward(DenoiserNet& host, ControlNetBranch& branch,
                                  const torch::Tensor& x, const torch::Tensor& t,
                                  const torch::Tensor& cond) {
    auto res = branch->forward(x, t, cond);
    return host->forward(x, t, &res);
}

}  // namespace echosynth
