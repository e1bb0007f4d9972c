#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "echosynth/clip.hpp"
#include "echosynth/dataset.hpp"

namespace echosynth {

// The regressor is trained on a centered scale: (ef_percent - kEfOffset) /
// kEfScale, so a zero-initialised head starts near the population midpoint
// and the optimizer works with roughly unit-sized targets.
constexpr double kEfOffset = 50.0;
constexpr double kEfScale = 25.0;

enum class EFBackbone { small3dcnn, resnet2plus1d_like, transformer_like };
const char* to_string(EFBackbone b);
EFBackbone ef_backbone_from_string(const std::string& s);

struct EFBackboneConfig {
    EFBackbone backbone = EFBackbone::small3dcnn;
    int64_t frames = kClipFrames;
    int64_t in_channels = kClipChannels;
    int64_t input_size = kClipSize;

    nlohmann::json to_json() const;
    static EFBackboneConfig from_json(const nlohmann::json& j);
};

// Five strided 3D conv blocks, global average pooling and a linear head
// (~200k parameters). The other backbone names are interface slots for
// full-scale models; constructing them throws InvalidConfig.
class EFRegressorImpl : public torch::nn::Module {
public:
    explicit EFRegressorImpl(const EFBackboneConfig& cfg);

    // x is [B, C, T, H, W]; returns [B] predictions on the centered scale.
    torch::Tensor forward(const torch::Tensor& x);

    const EFBackboneConfig& config() const { return cfg_; }

private:
    EFBackboneConfig cfg_;
    torch::nn::Sequential blocks{nullptr};
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(EFRegressor);

EFRegressor build_ef_model(const EFBackboneConfig& cfg, uint64_t seed);

// EF in percent, unclamped (reports clamp to [0, 100], training never does).
double predict_ef(EFRegressor& model, const EchoClip& clip);

// Biplane estimate: arithmetic mean of the two single-view predictions.
double predict_biplane(EFRegressor& model, const EchoClip& a4c, const EchoClip& a2c);

struct EFSample {
    torch::Tensor frames;  // [T, C, H, W]
    double ef_true = 0.0;
    std::string case_id;
};

std::vector<EFSample> ef_samples_from_cases(const std::vector<CaseRecord>& cases, ViewFilter filter);

struct EFTrainConfig {
    int64_t batch_size = 8;
    int64_t epochs = 50;
    double lr = 1e-3;
    uint64_t seed = 0;

    nlohmann::json to_json() const;
    static EFTrainConfig from_json(const nlohmann::json& j);
};

struct EFTrainResult {
    std::vector<double> val_curve;  // validation MSE (percent^2) per epoch
    int64_t best_epoch = -1;        // 0-based epoch whose weights were kept
    double best_val_mse = 0.0;
};

// MSE training with per-epoch validation; the model ends up holding the
// weights of the best-validation epoch. Deterministic for a fixed seed.
EFTrainResult train_ef(EFRegressor& model, const std::vector<EFSample>& train,
                       const std::vector<EFSample>& val, const EFTrainConfig& cfg);

// Validation-style MSE (percent^2) of the model on a sample set.
double ef_mse(EFRegressor& model, const std::vector<EFSample>& samples);

struct EFGrid {
    std::vector<int64_t> batch_sizes = {8, 16, 24};
    std::vector<int64_t> epochs = {50, 100, 150};
    std::vector<double> lrs = {1e-3, 5e-4, 1e-4};
};

// Cartesian product in (batch_size, epochs, lr) order — 27 configs for the
// full grid. Every config carries the same seed so runs differ only in
// hyperparameters.
std::vector<EFTrainConfig> enumerate_grid(const EFGrid& grid, uint64_t seed);

struct GridOutcome {
    EFRegressor best_model{nullptr};
    EFTrainConfig best_config;
    EFTrainResult best_result;
    size_t best_index = 0;
    std::vector<double> val_mses;  // best val MSE per grid entry
};

GridOutcome run_grid(const EFBackboneConfig& backbone, const std::vector<EFSample>& train,
                     const std::vector<EFSample>& val, const EFGrid& grid, uint64_t seed);

struct EFReport {
    double r2 = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    struct Row {
        std::string case_id;
        double ef_pred = 0.0;
        double ef_true = 0.0;
    };
    std::vector<Row> rows;

    std::string to_table() const;  // structured text, one row per case
    nlohmann::json to_json() const;
};

// EF model checkpoint (same ".esck" container as the trainer); provenance
// records how the weights were obtained (training config, grid outcome).
void save_ef_model(EFRegressor& model, const nlohmann::json& provenance,
                   const std::filesystem::path& path);

struct LoadedEFModel {
    EFRegressor model{nullptr};
    EFBackboneConfig config;
    nlohmann::json provenance;
};

LoadedEFModel load_ef_model(const std::filesystem::path& path);

// Standard R^2 / MAE / RMSE. Throws LengthMismatch (unequal or < 2 entries)
// and DegenerateTargets (all targets identical, R^2 undefined).
EFReport compute_metrics(const std::vector<double>& preds, const std::vector<double>& targets);

enum class EFMode { single_plane, biplane };
const char* to_string(EFMode m);
EFMode ef_mode_from_string(const std::string& s);

// Per-case evaluation; predictions are clamped to [0, 100] for the report.
// single_plane uses the A4C clip; biplane averages A4C and A2C predictions
// and skips cases without an A2C clip.
EFReport evaluate_ef(EFRegressor& model, const std::vector<CaseRecord>& cases, EFMode mode);

}  // namespace echosynth
