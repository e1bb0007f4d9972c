#include "echosynth/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "echosynth/adam.hpp"
#include "echosynth/checkpoint.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

namespace F = torch::nn::functional;

namespace {

// Mean SSIM of a single-channel frame pair [H, W] over valid window positions.
double ssim_frame(const torch::Tensor& a, const torch::Tensor& b, int64_t window, double c1,
                  double c2) {
    auto x = a.to(torch::kFloat64).reshape({1, 1, a.size(0), a.size(1)});
    auto y = b.to(torch::kFloat64).reshape({1, 1, b.size(0), b.size(1)});
    auto kernel = torch::full({1, 1, window, window}, 1.0 / (window * window), torch::kFloat64);
    auto box = [&kernel](const torch::Tensor& t) { return F::conv2d(t, kernel); };
    auto mu_x = box(x), mu_y = box(y);
    auto sigma_x = box(x * x) - mu_x * mu_x;
    auto sigma_y = box(y * y) - mu_y * mu_y;
    auto sigma_xy = box(x * y) - mu_x * mu_y;
    auto num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2);
    auto den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2);
    return (num / den).mean().item<double>();
}

}  // namespace

double ssim(const torch::Tensor& a, const torch::Tensor& b, int64_t window, double k1, double k2,
            double data_range) {
    if (!a.sizes().equals(b.sizes())) throw ShapeMismatch("ssim inputs must share a shape");
    if (a.dim() < 2 || a.dim() > 4) throw ShapeMismatch("ssim expects [H,W], [C,H,W] or [T,C,H,W]");
    if (window < 1 || window > std::min(a.size(-1), a.size(-2)))
        throw ShapeMismatch("ssim window larger than the image");
    const double c1 = (k1 * data_range) * (k1 * data_range);
    const double c2 = (k2 * data_range) * (k2 * data_range);
    if (a.dim() == 2) return ssim_frame(a, b, window, c1, c2);
    // Flatten leading dims ([C,H,W] or [T,C,H,W]) and average plane scores.
    auto af = a.reshape({-1, a.size(-2), a.size(-1)});
    auto bf = b.reshape({-1, b.size(-2), b.size(-1)});
    double sum = 0.0;
    for (int64_t i = 0; i < af.size(0); ++i)
        sum += ssim_frame(af[i], bf[i], window, c1, c2);
    return sum / static_cast<double>(af.size(0));
}

GaussianSummary fit_gaussian(const torch::Tensor& features) {
    if (features.dim() != 2) throw ShapeMismatch("fit_gaussian expects features [n, d]");
    const int64_t n = features.size(0);
    if (n < 2) throw TooFewSamples("need at least 2 feature rows, got " + std::to_string(n));
    auto f = features.to(torch::kFloat64);
    GaussianSummary g;
    g.mean = f.mean(0);
    auto centered = f - g.mean.reshape({1, -1});
    auto cov = centered.t().matmul(centered) / static_cast<double>(n - 1);
    g.cov = 0.5 * (cov + cov.t());
    return g;
}

namespace {

constexpr double kEigTolerance = 1e-8;

// Square root of a symmetric PSD matrix via eigendecomposition; eigenvalues
// in [-tol, 0) are treated as zero, anything below -tol is a genuine
// negative mode.
torch::Tensor sqrtm_psd(const torch::Tensor& sym, const char* what) {
    auto [vals, vecs] = torch::linalg_eigh(sym);
    if (vals.min().item<double>() < -kEigTolerance)
        throw NotPSD(std::string(what) + " has eigenvalue " +
                     std::to_string(vals.min().item<double>()) + " below -1e-8");
    auto clipped = vals.clamp_min(0.0);
    return vecs.matmul(torch::diag(clipped.sqrt())).matmul(vecs.t());
}

}  // namespace

double frechet_distance(const GaussianSummary& g1, const GaussianSummary& g2) {
    if (!g1.mean.sizes().equals(g2.mean.sizes()) || !g1.cov.sizes().equals(g2.cov.sizes()))
        throw DimensionMismatch("Gaussian summaries have different dimensions");
    auto s1 = sqrtm_psd(g1.cov, "first covariance");
    auto inner = s1.matmul(g2.cov).matmul(s1);
    inner = 0.5 * (inner + inner.t());
    auto cross = sqrtm_psd(inner, "covariance product");
    const double mean_term = (g1.mean - g2.mean).pow(2).sum().item<double>();
    const double tr = (g1.cov.diagonal().sum() + g2.cov.diagonal().sum()).item<double>() -
                      2.0 * cross.diagonal().sum().item<double>();
    return std::max(0.0, mean_term + tr);
}

nlohmann::json FeatureExtractorConfig::to_json() const {
    return nlohmann::json{{"feature_dim", feature_dim},
                          {"frames", frames},
                          {"in_channels", in_channels},
                          {"input_size", input_size}};
}

FeatureExtractorConfig FeatureExtractorConfig::from_json(const nlohmann::json& j) {
    FeatureExtractorConfig cfg;
    cfg.feature_dim = j.at("feature_dim").get<int64_t>();
    cfg.frames = j.at("frames").get<int64_t>();
    cfg.in_channels = j.at("in_channels").get<int64_t>();
    cfg.input_size = j.at("input_size").get<int64_t>();
    return cfg;
}

ClipEncoderImpl::ClipEncoderImpl(const FeatureExtractorConfig& cfg) : cfg_(cfg) {
    if (cfg.input_size % 8 != 0) throw InvalidConfig("feature extractor needs input_size % 8 == 0");
    namespace nn = torch::nn;
    conv = register_module(
        "conv",
        nn::Sequential(
            nn::Conv3d(nn::Conv3dOptions(cfg.in_channels, 16, {1, 3, 3}).stride({1, 2, 2}).padding({0, 1, 1})),
            nn::GroupNorm(nn::GroupNormOptions(4, 16)), nn::SiLU(),
            nn::Conv3d(nn::Conv3dOptions(16, 32, 3).stride({1, 2, 2}).padding(1)),
            nn::GroupNorm(nn::GroupNormOptions(8, 32)), nn::SiLU(),
            nn::Conv3d(nn::Conv3dOptions(32, 32, 3).stride({1, 2, 2}).padding(1)),
            nn::GroupNorm(nn::GroupNormOptions(8, 32)), nn::SiLU()));
    proj = register_module("proj", nn::Linear(32, cfg.feature_dim));
}

torch::Tensor ClipEncoderImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 5 || x.size(1) != cfg_.in_channels || x.size(2) != cfg_.frames ||
        x.size(3) != cfg_.input_size || x.size(4) != cfg_.input_size)
        throw ShapeMismatch("clip encoder expects [B, C, T, H, W] matching its config");
    auto h = conv->forward(x);          // [B, 32, T, S/8, S/8]
    h = h.mean(/*dim=*/{3, 4});         // spatial pool -> [B, 32, T]
    h = h.permute({0, 2, 1});           // [B, T, 32]
    return proj(h);                     // [B, T, d]
}

ClipAutoencoderImpl::ClipAutoencoderImpl(const FeatureExtractorConfig& cfg) : cfg_(cfg) {
    namespace nn = torch::nn;
    enc_ = register_module("enc", ClipEncoder(cfg));
    const int64_t s8 = cfg.input_size / 8;
    unproj = register_module("unproj", nn::Linear(cfg.feature_dim, 32 * s8 * s8));
    up1 = register_module("up1", nn::Conv3d(nn::Conv3dOptions(32, 16, 3).padding(1)));
    n1 = register_module("n1", nn::GroupNorm(nn::GroupNormOptions(4, 16)));
    up2 = register_module("up2", nn::Conv3d(nn::Conv3dOptions(16, 8, 3).padding(1)));
    n2 = register_module("n2", nn::GroupNorm(nn::GroupNormOptions(4, 8)));
    up3 = register_module(
        "up3", nn::Conv3d(nn::Conv3dOptions(8, cfg.in_channels, {1, 3, 3}).padding({0, 1, 1})));
}

torch::Tensor ClipAutoencoderImpl::forward(const torch::Tensor& x) {
    auto emb = enc_->forward(x);  // [B, T, d]
    const int64_t B = emb.size(0), T = emb.size(1);
    const int64_t s8 = cfg_.input_size / 8;
    auto h = unproj(emb);                                    // [B, T, 32*s8*s8]
    h = h.reshape({B, T, 32, s8, s8}).permute({0, 2, 1, 3, 4}).contiguous();
    auto up = [](const torch::Tensor& t) {
        return F::interpolate(t, F::InterpolateFuncOptions()
                                     .scale_factor(std::vector<double>{1.0, 2.0, 2.0})
                                     .mode(torch::kNearest));
    };
    h = torch::silu(n1(up1(up(h))));
    h = torch::silu(n2(up2(up(h))));
    return torch::tanh(up3(up(h)));
}

FeatureExtractor train_feature_extractor(const std::vector<EchoClip>& clips,
                                         const FeatureExtractorConfig& cfg, uint64_t seed,
                                         int64_t iters, int64_t batch_size, double lr) {
    if (clips.empty()) throw DataEmpty("feature extractor needs training clips");
    torch::manual_seed(derive_seed(seed, /*stream=*/4));
    ClipAutoencoder ae(cfg);
    std::vector<torch::Tensor> xs;
    for (const auto& c : clips) xs.push_back(clip_to_input(c.frames));
    auto x_all = torch::cat(xs, 0);
    auto gen = make_generator(derive_seed(seed, /*stream=*/5));
    Adam opt(collect_named_params("ae.", *ae));
    double last_loss = 0.0;
    for (int64_t it = 0; it < iters; ++it) {
        auto idx = torch::randint(0, x_all.size(0), {batch_size}, gen, torch::kInt64);
        auto x = x_all.index_select(0, idx);
        opt.zero_grad();
        auto recon = ae->forward(x);
        auto loss = (recon - x).pow(2).mean();
        last_loss = loss.item<double>();
        if (!std::isfinite(last_loss))
            throw NonFiniteLoss("autoencoder iteration " + std::to_string(it) +
                                " produced loss " + std::to_string(last_loss));
        loss.backward();
        opt.step(lr);
    }
    FeatureExtractor fx;
    fx.encoder = ae->encoder();
    fx.encoder->eval();
    for (auto& p : fx.encoder->parameters()) p.requires_grad_(false);
    fx.config = cfg;
    fx.provenance = nlohmann::json{{"seed", seed},
                                   {"iters", iters},
                                   {"batch_size", batch_size},
                                   {"lr", lr},
                                   {"training_clips", clips.size()},
                                   {"final_loss", last_loss}};
    return fx;
}

void save_feature_extractor(const FeatureExtractor& fx, const std::filesystem::path& path) {
    CheckpointData ckpt;
    ckpt.meta = nlohmann::json{{"schema_version", 1},
                               {"kind", "feature_extractor"},
                               {"config", fx.config.to_json()},
                               {"provenance", fx.provenance}};
    for (const auto& [name, p] : collect_named_params("encoder.", *fx.encoder))
        ckpt.add(name, p.clone());
    write_checkpoint(path, ckpt);
}

FeatureExtractor load_feature_extractor(const std::filesystem::path& path) {
    auto ckpt = read_checkpoint(path);
    if (ckpt.meta.value("kind", "") != "feature_extractor")
        throw ParseError(path.string() + " is not a feature extractor file");
    FeatureExtractor fx;
    fx.config = FeatureExtractorConfig::from_json(ckpt.meta.at("config"));
    fx.provenance = ckpt.meta.value("provenance", nlohmann::json::object());
    fx.encoder = ClipEncoder(fx.config);
    restore_named_params(ckpt.tensors, "encoder.", *fx.encoder);
    fx.encoder->eval();
    for (auto& p : fx.encoder->parameters()) p.requires_grad_(false);
    return fx;
}

const char* to_string(FeatureMode m) { return m == FeatureMode::per_frame ? "per_frame" : "per_clip"; }

FeatureMode feature_mode_from_string(const std::string& s) {
    if (s == "per_frame") return FeatureMode::per_frame;
    if (s == "per_clip") return FeatureMode::per_clip;
    throw ParseError("unknown feature mode: " + s);
}

const char* ffd_label(FeatureMode m) { return m == FeatureMode::per_frame ? "FFD-frame" : "FFD-clip"; }

torch::Tensor extract_features(const FeatureExtractor& fx, const EchoClip& clip, FeatureMode mode) {
    torch::NoGradGuard guard;
    auto encoder = fx.encoder;  // holder copy, same underlying module
    auto emb = encoder->forward(clip_to_input(clip.frames)).squeeze(0);  // [T, d]
    if (mode == FeatureMode::per_frame) return emb;
    return emb.mean(0, /*keepdim=*/true);  // [1, d]
}

double frechet_feature_distance(const std::vector<EchoClip>& a, const std::vector<EchoClip>& b,
                                const FeatureExtractor& fx, FeatureMode mode) {
    if (a.empty() || b.empty()) throw DataEmpty("both clip sets must be nonempty");
    auto collect = [&](const std::vector<EchoClip>& clips) {
        std::vector<torch::Tensor> rows;
        for (const auto& c : clips) rows.push_back(extract_features(fx, c, mode));
        return torch::cat(rows, 0);
    };
    return frechet_distance(fit_gaussian(collect(a)), fit_gaussian(collect(b)));
}

}  // namespace echosynth
