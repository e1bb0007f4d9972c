#pragma once

#include <torch/torch.h>

#include <cstdint>

#include "echosynth/unet.hpp"

namespace echosynth {

// Per-frame motion mask for a conditioning clip. frames is [T, C, H, W] in
// [-1, 1]; the result is [T, 1, H, W] in [0, 1]:
//   diff_t = |x_t - x_{t-1}| (channel-averaged), diff_0 = 0,
//   smoothed with a Gaussian (sigma = 1.5, truncated at 4 sigma),
//   then divided by 2 to map the [-1, 1] frame range onto [0, 1].
torch::Tensor motion_mask(const torch::Tensor& frames, double sigma = 1.5);

// Channel-concat of the conditioning view and its motion mask, arranged as
// network input [1, 2, T, H, W].
torch::Tensor make_condition(const torch::Tensor& a4c_frames);

// Trainable copy of the denoiser encoder that consumes the conditioning
// stack and emits one residual per host skip connection plus one for the
// middle block. Every connection back into the host passes through a
// zero-initialised 3D convolution, so a freshly attached branch leaves the
// host's function exactly unchanged.
class ControlNetBranchImpl : public torch::nn::Module {
public:
    ControlNetBranchImpl(const UNetConfig& cfg, int64_t cond_channels);

    // x is the noisy sample [B, C, T, H, W]; cond is [B, cond_channels, T, H, W].
    ControlResiduals forward(const torch::Tensor& x, const torch::Tensor& t,
                             const torch::Tensor& cond);

    const UNetConfig& config() const { return cfg_; }
    int64_t cond_channels() const { return cond_channels_; }
    UNetEncoder& encoder() { return encoder_; }
    TimeMlp& time_mlp() { return time_mlp_; }

private:
    UNetConfig cfg_;
    int64_t cond_channels_;
    TimeMlp time_mlp_{nullptr};
    UNetEncoder encoder_{nullptr};
    torch::nn::Conv3d cond_entry{nullptr};          // zero-init, maps cond into the stem activation
    std::vector<torch::nn::Conv3d> zero_skips_;     // zero-init 1x1x1, one per level
    torch::nn::Conv3d zero_mid{nullptr};
};
TORCH_MODULE(ControlNetBranch);

// Copies parameters and buffers between two modules with identical
// structure (throws BranchMismatch when the names do not line up).
void copy_module_state(const torch::nn::Module& src, torch::nn::Module& dst);

// Builds a branch for the host net: encoder and time-MLP weights are cloned
// from the host, all bridging convolutions start at exactly zero.
ControlNetBranch make_control_branch(DenoiserNet& host, int64_t cond_channels, uint64_t seed);

// Full conditional forward pass: branch residuals injected into the host.
torch::Tensor conditional_forward(DenoiserNet& host, ControlNetBranch& branch,
                                  const torch::Tensor& x, const torch::Tensor& t,
                                  const torch::Tensor& cond);

}  // namespace echosynth
