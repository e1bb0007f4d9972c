#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

namespace echosynth {

// Architecture of the 3D denoising U-Net. The desk-scale default matches
// 64x64 16-frame clips; smaller configs are used by gradient-check tests.
struct UNetConfig {
    int64_t levels = 4;
    int64_t base_channels = 32;
    std::vector<int64_t> channel_multipliers = {1, 2, 2, 4};
    int64_t time_embed_dim = 128;
    std::vector<int64_t> attention_levels = {2, 3};  // temporal attention at these levels
    int64_t in_channels = 1;
    int64_t frames = 16;
    int64_t input_size = 64;
    int64_t blocks_per_level = 1;
    int64_t attention_heads = 2;
    int64_t stem_stride = 1;  // spatial stride of the input conv (1 or 2)
    int64_t norm_groups = 8;

    int64_t channels_at(int64_t level) const { return base_channels * channel_multipliers.at(level); }
    bool attention_at(int64_t level) const;
    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
};

// Throws InvalidConfig when the geometry does not work out.
void validate_config(const UNetConfig& cfg);

// Residuals produced by the control branch, one per encoder level plus the
// middle block. Shapes align with the host U-Net's skip connections.
struct ControlResiduals {
    std::vector<torch::Tensor> per_level;
    torch::Tensor middle;
};

torch::Tensor sinusoidal_time_embedding(const torch::Tensor& t, int64_t dim, torch::TensorOptions opts);

class TimeMlpImpl : public torch::nn::Module {
public:
    TimeMlpImpl(int64_t sinusoid_dim, int64_t embed_dim);
    torch::Tensor forward(const torch::Tensor& t, torch::TensorOptions opts);

private:
    int64_t sinusoid_dim_;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeMlp);

class ResBlock3dImpl : public torch::nn::Module {
public:
    ResBlock3dImpl(int64_t in_ch, int64_t out_ch, int64_t time_dim, int64_t norm_groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
    torch::nn::Linear time_proj{nullptr};
    torch::nn::Conv3d skip{nullptr};  // 1x1x1 when in_ch != out_ch
};
TORCH_MODULE(ResBlock3d);

// Self-attention across the frame axis, applied independently per spatial
// location, with a learned temporal position embedding.
class TemporalAttentionImpl : public torch::nn::Module {
public:
    TemporalAttentionImpl(int64_t channels, int64_t heads, int64_t frames);
    torch::Tensor forward(const torch::Tensor& x);  // [B, C, T, H, W]

private:
    int64_t heads_;
    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear qkv{nullptr}, proj{nullptr};
    torch::Tensor pos_embed;
};
TORCH_MODULE(TemporalAttention);

// Stem, per-level ResNet blocks with optional temporal attention,
// downsampling convs and the middle block. Shared between the denoiser and
// the control branch so weight copying is a plain state copy.
class UNetEncoderImpl : public torch::nn::Module {
public:
    explicit UNetEncoderImpl(const UNetConfig& cfg);

    struct Output {
        std::vector<torch::Tensor> skips;  // one per level
        torch::Tensor middle;
    };

    // inject_after_stem, when defined, is added to the stem activation
    // (the control branch feeds its condition in through this hook).
    Output forward(const torch::Tensor& x, const torch::Tensor& temb,
                   const std::optional<torch::Tensor>& inject_after_stem = std::nullopt);

private:
    UNetConfig cfg_;
    torch::nn::Conv3d stem{nullptr};
    std::vector<std::vector<ResBlock3d>> level_blocks_;
    std::vector<TemporalAttention> level_attn_;  // null handle when unused
    std::vector<torch::nn::Conv3d> downs_;
    ResBlock3d mid_block1{nullptr}, mid_block2{nullptr};
    TemporalAttention mid_attn{nullptr};
};
TORCH_MODULE(UNetEncoder);

class DenoiserNetImpl : public torch::nn::Module {
public:
    explicit DenoiserNetImpl(const UNetConfig& cfg);

    // x is [B, C, T, H, W]; t is a scalar or [B] int64 tensor of diffusion
    // steps. With residuals == nullptr (or all zeros) this is the plain
    // unconditional denoiser.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t,
                          const ControlResiduals* residuals = nullptr);

    const UNetConfig& config() const { return cfg_; }
    UNetEncoder& encoder() { return encoder_; }
    TimeMlp& time_mlp() { return time_mlp_; }

private:
    UNetConfig cfg_;
    TimeMlp time_mlp_{nullptr};
    UNetEncoder encoder_{nullptr};
    std::vector<std::vector<ResBlock3d>> dec_blocks_;
    std::vector<TemporalAttention> dec_attn_;
    std::vector<torch::nn::Conv3d> ups_;
    torch::nn::GroupNorm head_norm{nullptr};
    torch::nn::Conv3d head_conv{nullptr};
    torch::nn::Conv3d post_up{nullptr};  // only when stem_stride == 2
};
TORCH_MODULE(DenoiserNet);

// Deterministic construction from a seed; returns the net and its
// parameter count.
DenoiserNet build_unet(const UNetConfig& cfg, uint64_t seed);
int64_t parameter_count(const torch::nn::Module& m);

// Single-clip denoise: frames [T, C, H, W] in, eps_hat of the same shape out.
torch::Tensor denoise(DenoiserNet& net, const torch::Tensor& clip_frames, int64_t t,
                      const ControlResiduals* residuals = nullptr);

}  // namespace echosynth
