#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "echosynth/clip.hpp"

namespace echosynth {

// Structural similarity with a uniform window, computed on the valid region
// (no padding). Accepts [H, W], [C, H, W] (mean over channels) or clips
// [T, C, H, W] (mean over frames). Values are assumed to share data_range
// (2.0 for [-1, 1] clips). Result lies in [-1, 1]; 1.0 iff inputs match.
double ssim(const torch::Tensor& a, const torch::Tensor& b, int64_t window = 7, double k1 = 0.01,
            double k2 = 0.03, double data_range = 2.0);

struct GaussianSummary {
    torch::Tensor mean;  // [d] float64
    torch::Tensor cov;   // [d, d] float64, symmetrized
};

// Sample mean and covariance (divisor n - 1), symmetrized. features is
// [n, d]; n >= 2 required.
GaussianSummary fit_gaussian(const torch::Tensor& features);

// Fréchet distance ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). The
// matrix square root uses symmetric eigendecomposition; eigenvalues in
// [-1e-8, 0) are clipped to zero, anything lower raises NotPSD.
double frechet_distance(const GaussianSummary& g1, const GaussianSummary& g2);

// Small clip autoencoder: the frozen encoder provides per-frame embeddings
// for Fréchet feature distances. Trained from scratch on phantom clips, so
// no third-party pretrained weights are involved; distances are therefore
// comparable only within one extractor and are reported as FFD-frame /
// FFD-clip, never as FID / FVD.
struct FeatureExtractorConfig {
    int64_t feature_dim = 64;
    int64_t frames = kClipFrames;
    int64_t in_channels = kClipChannels;
    int64_t input_size = kClipSize;

    nlohmann::json to_json() const;
    static FeatureExtractorConfig from_json(const nlohmann::json& j);
};

class ClipEncoderImpl : public torch::nn::Module {
public:
    explicit ClipEncoderImpl(const FeatureExtractorConfig& cfg);
    // x [B, C, T, H, W] -> per-frame embeddings [B, T, d]
    torch::Tensor forward(const torch::Tensor& x);

private:
    FeatureExtractorConfig cfg_;
    torch::nn::Sequential conv{nullptr};
    torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(ClipEncoder);

class ClipAutoencoderImpl : public torch::nn::Module {
public:
    explicit ClipAutoencoderImpl(const FeatureExtractorConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);  // reconstruction
    ClipEncoder& encoder() { return enc_; }

private:
    FeatureExtractorConfig cfg_;
    ClipEncoder enc_{nullptr};
    torch::nn::Linear unproj{nullptr};
    torch::nn::Conv3d up1{nullptr}, up2{nullptr}, up3{nullptr};
    torch::nn::GroupNorm n1{nullptr}, n2{nullptr};
};
TORCH_MODULE(ClipAutoencoder);

struct FeatureExtractor {
    ClipEncoder encoder{nullptr};
    FeatureExtractorConfig config;
    nlohmann::json provenance;  // seed, iterations, training-set size, final loss
};

// Trains the autoencoder on the given clips (reconstruction MSE) and
// returns the frozen encoder. Deterministic for a fixed seed.
FeatureExtractor train_feature_extractor(const std::vector<EchoClip>& clips,
                                         const FeatureExtractorConfig& cfg, uint64_t seed,
                                         int64_t iters = 300, int64_t batch_size = 4,
                                         double lr = 1e-3);

void save_feature_extractor(const FeatureExtractor& fx, const std::filesystem::path& path);
FeatureExtractor load_feature_extractor(const std::filesystem::path& path);

enum class FeatureMode { per_frame, per_clip };
const char* to_string(FeatureMode m);
FeatureMode feature_mode_from_string(const std::string& s);
// Report label: "FFD-frame" or "FFD-clip".
const char* ffd_label(FeatureMode m);

// per_frame: one feature row per frame [T, d]; per_clip: the frame
// embeddings averaged into one row [1, d].
torch::Tensor extract_features(const FeatureExtractor& fx, const EchoClip& clip, FeatureMode mode);

// Fréchet feature distance between two clip sets; both need enough rows to
// fit a Gaussian (n >= 2 after feature extraction).
double frechet_feature_distance(const std::vector<EchoClip>& a, const std::vector<EchoClip>& b,
                                const FeatureExtractor& fx, FeatureMode mode);

}  // namespace echosynth
