#include "echosynth/unet.hpp"

#include <cmath>
#include <string>

#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

namespace {

// GroupNorm needs a divisor of the channel count; fall back to the largest
// divisor not exceeding the requested group count.
int64_t groups_for(int64_t channels, int64_t requested) {
    int64_t g = std::min(requested, channels);
    while (channels % g != 0) --g;
    return g;
}

}  // namespace

bool UNetConfig::attention_at(int64_t level) const {
    for (int64_t a : attention_levels)
        if (a == level) return true;
    return false;
}

nlohmann::json UNetConfig::to_json() const {
    return nlohmann::json{{"levels", levels},
                          {"base_channels", base_channels},
                          {"channel_multipliers", channel_multipliers},
                          {"time_embed_dim", time_embed_dim},
                          {"attention_levels", attention_levels},
                          {"in_channels", in_channels},
                          {"frames", frames},
                          {"input_size", input_size},
                          {"blocks_per_level", blocks_per_level},
                          {"attention_heads", attention_heads},
                          {"stem_stride", stem_stride},
                          {"norm_groups", norm_groups}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
    UNetConfig cfg;
    cfg.levels = j.at("levels").get<int64_t>();
    cfg.base_channels = j.at("base_channels").get<int64_t>();
    cfg.channel_multipliers = j.at("channel_multipliers").get<std::vector<int64_t>>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<int64_t>();
    cfg.attention_levels = j.at("attention_levels").get<std::vector<int64_t>>();
    cfg.in_channels = j.at("in_channels").get<int64_t>();
    cfg.frames = j.at("frames").get<int64_t>();
    cfg.input_size = j.at("input_size").get<int64_t>();
    cfg.blocks_per_level = j.at("blocks_per_level").get<int64_t>();
    cfg.attention_heads = j.at("attention_heads").get<int64_t>();
    cfg.stem_stride = j.at("stem_stride").get<int64_t>();
    cfg.norm_groups = j.at("norm_groups").get<int64_t>();
    return cfg;
}

void validate_config(const UNetConfig& cfg) {
    if (cfg.levels < 1) throw InvalidConfig("levels must be >= 1");
    if (cfg.base_channels < 1) throw InvalidConfig("base_channels must be >= 1");
    if (static_cast<int64_t>(cfg.channel_multipliers.size()) != cfg.levels)
        throw InvalidConfig("channel_multipliers must have one entry per level");
    for (int64_t m : cfg.channel_multipliers)
        if (m < 1) throw InvalidConfig("channel multipliers must be >= 1");
    if (cfg.time_embed_dim < 2 || cfg.base_channels % 2 != 0)
        throw InvalidConfig("time embedding needs an even sinusoid dimension");
    for (int64_t a : cfg.attention_levels)
        if (a < 0 || a >= cfg.levels) throw InvalidConfig("attention level out of range");
    if (cfg.in_channels < 1) throw InvalidConfig("in_channels must be >= 1");
    if (cfg.frames < 1) throw InvalidConfig("frames must be >= 1");
    if (cfg.stem_stride != 1 && cfg.stem_stride != 2)
        throw InvalidConfig("stem_stride must be 1 or 2");
    if (cfg.input_size % cfg.stem_stride != 0)
        throw InvalidConfig("input_size must be divisible by stem_stride");
    const int64_t stem_size = cfg.input_size / cfg.stem_stride;
    const int64_t down_factor = int64_t{1} << (cfg.levels - 1);
    if (stem_size % down_factor != 0)
        throw InvalidConfig("input_size must be divisible by 2^(levels-1) after the stem");
    if (cfg.blocks_per_level < 1) throw InvalidConfig("blocks_per_level must be >= 1");
    if (cfg.attention_heads < 1) throw InvalidConfig("attention_heads must be >= 1");
    for (int64_t a : cfg.attention_levels)
        if (cfg.channels_at(a) % cfg.attention_heads != 0)
            throw InvalidConfig("attention_heads must divide the channel count at level " +
                                std::to_string(a));
    if (cfg.norm_groups < 1) throw InvalidConfig("norm_groups must be >= 1");
}

torch::Tensor sinusoidal_time_embedding(const torch::Tensor& t, int64_t dim, torch::TensorOptions opts) {
    if (dim < 2 || dim % 2 != 0) throw InvalidConfig("sinusoid dimension must be even and >= 2");
    const int64_t half = dim / 2;
    const auto st = torch::typeMetaToScalarType(opts.dtype());
    auto tf = t.to(st == torch::kFloat64 ? torch::kFloat64 : torch::kFloat32).reshape({-1, 1});
    auto freqs = torch::exp(torch::arange(half, tf.options()) * (-std::log(10000.0) / half));
    auto args = tf * freqs.reshape({1, half});
    return torch::cat({torch::sin(args), torch::cos(args)}, /*dim=*/1);
}

TimeMlpImpl::TimeMlpImpl(int64_t sinusoid_dim, int64_t embed_dim) : sinusoid_dim_(sinusoid_dim) {
    fc1 = register_module("fc1", torch::nn::Linear(sinusoid_dim, embed_dim));
    fc2 = register_module("fc2", torch::nn::Linear(embed_dim, embed_dim));
}

torch::Tensor TimeMlpImpl::forward(const torch::Tensor& t, torch::TensorOptions opts) {
    auto emb = sinusoidal_time_embedding(t, sinusoid_dim_, opts);
    emb = emb.to(fc1->weight.dtype());
    return fc2(torch::silu(fc1(emb)));
}

ResBlock3dImpl::ResBlock3dImpl(int64_t in_ch, int64_t out_ch, int64_t time_dim, int64_t norm_groups) {
    namespace nn = torch::nn;
    norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(groups_for(in_ch, norm_groups), in_ch)));
    conv1 = register_module("conv1", nn::Conv3d(nn::Conv3dOptions(in_ch, out_ch, 3).padding(1)));
    time_proj = register_module("time_proj", nn::Linear(time_dim, out_ch));
    norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(groups_for(out_ch, norm_groups), out_ch)));
    conv2 = register_module("conv2", nn::Conv3d(nn::Conv3dOptions(out_ch, out_ch, 3).padding(1)));
    if (in_ch != out_ch)
        skip = register_module("skip", nn::Conv3d(nn::Conv3dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResBlock3dImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    // temb is [B, time_dim]; broadcast over frames and space.
    auto scale = time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1).unsqueeze(-1);
    h = h + scale;
    h = conv2(torch::silu(norm2(h)));
    auto sk = skip ? skip(x) : x;
    return h + sk;
}

TemporalAttentionImpl::TemporalAttentionImpl(int64_t channels, int64_t heads, int64_t frames)
    : heads_(heads) {
    namespace nn = torch::nn;
    norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({channels})));
    qkv = register_module("qkv", nn::Linear(nn::LinearOptions(channels, 3 * channels)));
    proj = register_module("proj", nn::Linear(channels, channels));
    pos_embed = register_parameter("pos_embed", torch::randn({1, frames, channels}) * 0.02);
}

torch::Tensor TemporalAttentionImpl::forward(const torch::Tensor& x) {
    const int64_t B = x.size(0), C = x.size(1), T = x.size(2), H = x.size(3), W = x.size(4);
    // Tokens: one sequence of T frames per (batch, spatial) location.
    auto tokens = x.permute({0, 3, 4, 2, 1}).reshape({B * H * W, T, C});
    auto h = norm(tokens) + pos_embed;
    auto qkv_out = qkv(h).reshape({B * H * W, T, 3, heads_, C / heads_});
    auto q = qkv_out.select(2, 0).permute({0, 2, 1, 3});  // [N, heads, T, d]
    auto k = qkv_out.select(2, 1).permute({0, 2, 1, 3});
    auto v = qkv_out.select(2, 2).permute({0, 2, 1, 3});
    const double scale = 1.0 / std::sqrt(static_cast<double>(C / heads_));
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, /*dim=*/-1);
    auto out = torch::matmul(attn, v).permute({0, 2, 1, 3}).reshape({B * H * W, T, C});
    tokens = tokens + proj(out);
    return tokens.reshape({B, H, W, T, C}).permute({0, 4, 3, 1, 2}).contiguous();
}

UNetEncoderImpl::UNetEncoderImpl(const UNetConfig& cfg) : cfg_(cfg) {
    namespace nn = torch::nn;
    stem = register_module(
        "stem", nn::Conv3d(nn::Conv3dOptions(cfg.in_channels, cfg.channels_at(0), 3)
                               .stride({1, cfg.stem_stride, cfg.stem_stride})
                               .padding(1)));
    for (int64_t lvl = 0; lvl < cfg.levels; ++lvl) {
        const int64_t ch = cfg.channels_at(lvl);
        const int64_t prev = lvl == 0 ? ch : cfg.channels_at(lvl - 1);
        std::vector<ResBlock3d> blocks;
        for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
            auto blk = ResBlock3d(b == 0 ? prev : ch, ch, cfg.time_embed_dim, cfg.norm_groups);
            register_module("level" + std::to_string(lvl) + "_block" + std::to_string(b), blk);
            blocks.push_back(blk);
        }
        level_blocks_.push_back(std::move(blocks));
        if (cfg.attention_at(lvl)) {
            auto attn = TemporalAttention(ch, cfg.attention_heads, cfg.frames);
            register_module("level" + std::to_string(lvl) + "_attn", attn);
            level_attn_.push_back(attn);
        } else {
            level_attn_.push_back(TemporalAttention(nullptr));
        }
        if (lvl + 1 < cfg.levels) {
            auto down = nn::Conv3d(
                nn::Conv3dOptions(ch, ch, 3).stride({1, 2, 2}).padding(1));
            register_module("down" + std::to_string(lvl), down);
            downs_.push_back(down);
        }
    }
    const int64_t mid_ch = cfg.channels_at(cfg.levels - 1);
    mid_block1 = register_module("mid_block1",
                                 ResBlock3d(mid_ch, mid_ch, cfg.time_embed_dim, cfg.norm_groups));
    mid_attn = register_module("mid_attn",
                               TemporalAttention(mid_ch, cfg.attention_heads, cfg.frames));
    mid_block2 = register_module("mid_block2",
                                 ResBlock3d(mid_ch, mid_ch, cfg.time_embed_dim, cfg.norm_groups));
}

UNetEncoderImpl::Output UNetEncoderImpl::forward(const torch::Tensor& x, const torch::Tensor& temb,
                                                 const std::optional<torch::Tensor>& inject_after_stem) {
    auto h = stem(x);
    if (inject_after_stem) h = h + *inject_after_stem;
    Output out;
    for (int64_t lvl = 0; lvl < cfg_.levels; ++lvl) {
        for (auto& blk : level_blocks_[lvl]) h = blk(h, temb);
        if (level_attn_[lvl]) h = level_attn_[lvl](h);
        out.skips.push_back(h);
        if (lvl + 1 < cfg_.levels) h = downs_[lvl](h);
    }
    h = mid_block1(h, temb);
    h = mid_attn(h);
    out.middle = mid_block2(h, temb);
    return out;
}

DenoiserNetImpl::DenoiserNetImpl(const UNetConfig& cfg) : cfg_(cfg) {
    validate_config(cfg);
    namespace nn = torch::nn;
    time_mlp_ = register_module("time_mlp", TimeMlp(cfg.base_channels, cfg.time_embed_dim));
    encoder_ = register_module("encoder", UNetEncoder(cfg));
    for (int64_t lvl = 0; lvl < cfg.levels; ++lvl) {
        const int64_t ch = cfg.channels_at(lvl);
        std::vector<ResBlock3d> blocks;
        for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
            // The first decoder block at each level consumes the upsampled
            // feature concatenated with the encoder skip.
            const int64_t in_ch = b == 0 ? 2 * ch : ch;
            auto blk = ResBlock3d(in_ch, ch, cfg.time_embed_dim, cfg.norm_groups);
            register_module("dec" + std::to_string(lvl) + "_block" + std::to_string(b), blk);
            blocks.push_back(blk);
        }
        dec_blocks_.push_back(std::move(blocks));
        if (cfg.attention_at(lvl)) {
            auto attn = TemporalAttention(ch, cfg.attention_heads, cfg.frames);
            register_module("dec" + std::to_string(lvl) + "_attn", attn);
            dec_attn_.push_back(attn);
        } else {
            dec_attn_.push_back(TemporalAttention(nullptr));
        }
        if (lvl > 0) {
            auto up = nn::Conv3d(
                nn::Conv3dOptions(cfg.channels_at(lvl), cfg.channels_at(lvl - 1), 3).padding(1));
            register_module("up" + std::to_string(lvl), up);
            ups_.push_back(up);
        } else {
            ups_.push_back(nn::Conv3d(nullptr));
        }
    }
    const int64_t head_in = cfg.stem_stride == 2 ? std::max<int64_t>(cfg.base_channels / 4, 8)
                                                 : cfg.base_channels;
    if (cfg.stem_stride == 2) {
        post_up = register_module(
            "post_up", nn::Conv3d(nn::Conv3dOptions(cfg.base_channels, head_in, {1, 3, 3})
                                      .padding({0, 1, 1})));
    }
    head_norm = register_module(
        "head_norm", nn::GroupNorm(nn::GroupNormOptions(groups_for(head_in, cfg.norm_groups), head_in)));
    head_conv = register_module(
        "head_conv", nn::Conv3d(nn::Conv3dOptions(head_in, cfg.in_channels, 3).padding(1)));
}

torch::Tensor DenoiserNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                       const ControlResiduals* residuals) {
    if (x.dim() != 5)
        throw ShapeMismatch("denoiser expects [B, C, T, H, W], got " +
                            std::to_string(x.dim()) + " dims");
    if (x.size(1) != cfg_.in_channels || x.size(2) != cfg_.frames ||
        x.size(3) != cfg_.input_size || x.size(4) != cfg_.input_size)
        throw ShapeMismatch("denoiser input does not match the configured geometry");
    auto tt = t.dim() == 0 ? t.reshape({1}).expand({x.size(0)}) : t;
    if (tt.size(0) != x.size(0)) throw ShapeMismatch("t must be scalar or one entry per batch item");
    auto temb = time_mlp_->forward(tt, x.options());

    auto enc = encoder_->forward(x, temb);
    if (residuals) {
        if (static_cast<int64_t>(residuals->per_level.size()) != cfg_.levels)
            throw BranchMismatch("control residuals do not cover every level");
        for (int64_t lvl = 0; lvl < cfg_.levels; ++lvl) {
            if (!residuals->per_level[lvl].sizes().equals(enc.skips[lvl].sizes()))
                throw BranchMismatch("control residual shape mismatch at level " + std::to_string(lvl));
            enc.skips[lvl] = enc.skips[lvl] + residuals->per_level[lvl];
        }
        if (!residuals->middle.sizes().equals(enc.middle.sizes()))
            throw BranchMismatch("control residual shape mismatch at the middle block");
        enc.middle = enc.middle + residuals->middle;
    }

    auto h = enc.middle;
    namespace F = torch::nn::functional;
    for (int64_t lvl = cfg_.levels - 1; lvl >= 0; --lvl) {
        h = torch::cat({h, enc.skips[lvl]}, /*dim=*/1);
        for (auto& blk : dec_blocks_[lvl]) h = blk(h, temb);
        if (dec_attn_[lvl]) h = dec_attn_[lvl](h);
        if (lvl > 0) {
            h = F::interpolate(h, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{1.0, 2.0, 2.0})
                                      .mode(torch::kNearest));
            h = ups_[lvl](h);
        }
    }
    if (cfg_.stem_stride == 2) {
        h = F::interpolate(h, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{1.0, 2.0, 2.0})
                                  .mode(torch::kNearest));
        h = post_up(h);
    }
    return head_conv(torch::silu(head_norm(h)));
}

DenoiserNet build_unet(const UNetConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    torch::manual_seed(seed);
    return DenoiserNet(cfg);
}

int64_t parameter_count(const torch::nn::Module& m) {
    int64_t n = 0;
    for (const auto& p : m.parameters()) n += p.numel();
    return n;
}

torch::Tensor denoise(DenoiserNet& net, const torch::Tensor& clip_frames, int64_t t,
                      const ControlResiduals* residuals) {
    if (t < 1) throw StepOutOfRange("diffusion step must be >= 1");
    if (clip_frames.dim() != 4)
        throw ShapeMismatch("denoise expects clip frames [T, C, H, W]");
    auto x = clip_frames.permute({1, 0, 2, 3}).unsqueeze(0);  // [1, C, T, H, W]
    auto tt = torch::tensor({t}, torch::kInt64);
    auto eps = net->forward(x, tt, residuals);
    return eps.squeeze(0).permute({1, 0, 2, 3}).contiguous();
}

}  // namespace echosynth
