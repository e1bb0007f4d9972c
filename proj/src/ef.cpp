#include "echosynth/ef.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "echosynth/adam.hpp"
#include "echosynth/checkpoint.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

const char* to_string(EFBackbone b) {
    switch (b) {
        case EFBackbone::small3dcnn: return "small3dcnn";
        case EFBackbone::resnet2plus1d_like: return "resnet2plus1d_like";
        case EFBackbone::transformer_like: return "transformer_like";
    }
    return "?";
}

EFBackbone ef_backbone_from_string(const std::string& s) {
    if (s == "small3dcnn") return EFBackbone::small3dcnn;
    if (s == "resnet2plus1d_like") return EFBackbone::resnet2plus1d_like;
    if (s == "transformer_like") return EFBackbone::transformer_like;
    throw ParseError("unknown EF backbone: " + s);
}

nlohmann::json EFBackboneConfig::to_json() const {
    return nlohmann::json{{"backbone", to_string(backbone)},
                          {"frames", frames},
                          {"in_channels", in_channels},
                          {"input_size", input_size}};
}

EFBackboneConfig EFBackboneConfig::from_json(const nlohmann::json& j) {
    EFBackboneConfig cfg;
    cfg.backbone = ef_backbone_from_string(j.at("backbone").get<std::string>());
    cfg.frames = j.at("frames").get<int64_t>();
    cfg.in_channels = j.at("in_channels").get<int64_t>();
    cfg.input_size = j.at("input_size").get<int64_t>();
    return cfg;
}

EFRegressorImpl::EFRegressorImpl(const EFBackboneConfig& cfg) : cfg_(cfg) {
    if (cfg.backbone != EFBackbone::small3dcnn)
        throw InvalidConfig(std::string(to_string(cfg.backbone)) +
                            " is an interface slot for full-scale backbones; only "
                            "small3dcnn is implemented here");
    if (cfg.frames < 2 || cfg.input_size < 16)
        throw InvalidConfig("EF backbone needs at least 2 frames and 16x16 input");
    namespace nn = torch::nn;
    blocks = nn::Sequential();
    auto add_block = [this](int64_t in_ch, int64_t out_ch, torch::ExpandingArray<3> stride) {
        int64_t groups = std::min<int64_t>(8, out_ch);
        while (out_ch % groups != 0) --groups;
        blocks->push_back(nn::Conv3d(nn::Conv3dOptions(in_ch, out_ch, 3).stride(stride).padding(1)));
        blocks->push_back(nn::GroupNorm(nn::GroupNormOptions(groups, out_ch)));
        blocks->push_back(nn::SiLU());
    };
    add_block(cfg.in_channels, 16, {1, 2, 2});
    add_block(16, 24, {2, 2, 2});
    add_block(24, 40, {2, 2, 2});
    add_block(40, 56, {2, 2, 2});
    add_block(56, 64, {1, 1, 1});
    register_module("blocks", blocks);
    head = register_module("head", nn::Linear(64, 1));
}

torch::Tensor EFRegressorImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 5 || x.size(1) != cfg_.in_channels || x.size(2) != cfg_.frames ||
        x.size(3) != cfg_.input_size || x.size(4) != cfg_.input_size)
        throw ShapeMismatch("EF regressor expects [B, C, T, H, W] matching its config");
    auto h = blocks->forward(x);
    h = h.mean(/*dim=*/{2, 3, 4});  // global average pool -> [B, 64]
    return head(h).squeeze(-1);
}

EFRegressor build_ef_model(const EFBackboneConfig& cfg, uint64_t seed) {
    torch::manual_seed(seed);
    return EFRegressor(cfg);
}

double predict_ef(EFRegressor& model, const EchoClip& clip) {
    validate_clip(clip);
    torch::NoGradGuard guard;
    model->eval();
    auto out = model->forward(clip_to_input(clip.frames));
    return kEfOffset + kEfScale * out.item<double>();
}

double predict_biplane(EFRegressor& model, const EchoClip& a4c, const EchoClip& a2c) {
    return 0.5 * (predict_ef(model, a4c) + predict_ef(model, a2c));
}

std::vector<EFSample> ef_samples_from_cases(const std::vector<CaseRecord>& cases, ViewFilter filter) {
    std::vector<EFSample> out;
    for (const auto& rec : cases) {
        if (filter != ViewFilter::a2c_only)
            out.push_back({rec.a4c.frames, rec.ef_true, rec.a4c.case_id});
        if (filter != ViewFilter::a4c_only && rec.a2c)
            out.push_back({rec.a2c->frames, rec.ef_true, rec.a2c->case_id});
    }
    return out;
}

nlohmann::json EFTrainConfig::to_json() const {
    return nlohmann::json{
        {"batch_size", batch_size}, {"epochs", epochs}, {"lr", lr}, {"seed", seed}};
}

EFTrainConfig EFTrainConfig::from_json(const nlohmann::json& j) {
    EFTrainConfig cfg;
    cfg.batch_size = j.at("batch_size").get<int64_t>();
    cfg.epochs = j.at("epochs").get<int64_t>();
    cfg.lr = j.at("lr").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

namespace {

struct StackedSamples {
    torch::Tensor x;        // [n, C, T, H, W]
    torch::Tensor targets;  // [n] centered scale, float32
};

StackedSamples stack_samples(const std::vector<EFSample>& samples) {
    std::vector<torch::Tensor> xs;
    std::vector<float> ts;
    for (const auto& s : samples) {
        xs.push_back(clip_to_input(s.frames));
        ts.push_back(static_cast<float>((s.ef_true - kEfOffset) / kEfScale));
    }
    StackedSamples out;
    out.x = torch::cat(xs, 0);
    out.targets = torch::tensor(ts, torch::kFloat32);
    return out;
}

// Mean squared error in percent^2 units, evaluated in chunks.
double mse_percent(EFRegressor& model, const StackedSamples& data) {
    torch::NoGradGuard guard;
    model->eval();
    const int64_t n = data.x.size(0);
    double se = 0.0;
    for (int64_t start = 0; start < n; start += 32) {
        const int64_t stop = std::min<int64_t>(start + 32, n);
        auto pred = model->forward(data.x.slice(0, start, stop));
        auto diff = (pred - data.targets.slice(0, start, stop)) * kEfScale;
        se += diff.pow(2).sum().item<double>();
    }
    return se / static_cast<double>(n);
}

}  // namespace

double ef_mse(EFRegressor& model, const std::vector<EFSample>& samples) {
    if (samples.empty()) throw DataEmpty("no samples to evaluate");
    return mse_percent(model, stack_samples(samples));
}

EFTrainResult train_ef(EFRegressor& model, const std::vector<EFSample>& train,
                       const std::vector<EFSample>& val, const EFTrainConfig& cfg) {
    if (train.empty()) throw DataEmpty("EF training set is empty");
    if (val.empty()) throw DataEmpty("EF validation set is empty");
    if (cfg.batch_size < 1 || cfg.epochs < 1 || cfg.lr <= 0.0)
        throw InvalidConfig("EF training needs batch_size >= 1, epochs >= 1, lr > 0");

    auto train_data = stack_samples(train);
    auto val_data = stack_samples(val);
    auto gen = make_generator(derive_seed(cfg.seed, /*stream=*/2));
    Adam opt(collect_named_params("ef.", *model));

    EFTrainResult result;
    NamedParams best;
    const int64_t n = train_data.x.size(0);
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        model->train();
        auto perm = torch::randperm(n, gen, torch::kInt64);
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            const int64_t stop = std::min<int64_t>(start + cfg.batch_size, n);
            auto idx = perm.slice(0, start, stop);
            opt.zero_grad();
            auto pred = model->forward(train_data.x.index_select(0, idx));
            auto loss = (pred - train_data.targets.index_select(0, idx)).pow(2).mean();
            const double loss_val = loss.item<double>();
            if (!std::isfinite(loss_val))
                throw NonFiniteLoss("EF epoch " + std::to_string(epoch) + " produced loss " +
                                    std::to_string(loss_val));
            loss.backward();
            opt.step(cfg.lr);
        }
        const double val_mse = mse_percent(model, val_data);
        result.val_curve.push_back(val_mse);
        if (result.best_epoch < 0 || val_mse < result.best_val_mse) {
            result.best_epoch = epoch;
            result.best_val_mse = val_mse;
            best.clear();
            torch::NoGradGuard guard;
            for (const auto& [name, p] : collect_named_params("ef.", *model))
                best.emplace_back(name, p.clone());
        }
    }
    restore_named_params(best, "ef.", *model);
    return result;
}

std::vector<EFTrainConfig> enumerate_grid(const EFGrid& grid, uint64_t seed) {
    std::vector<EFTrainConfig> out;
    for (int64_t bs : grid.batch_sizes)
        for (int64_t ep : grid.epochs)
            for (double lr : grid.lrs) {
                EFTrainConfig cfg;
                cfg.batch_size = bs;
                cfg.epochs = ep;
                cfg.lr = lr;
                cfg.seed = seed;
                out.push_back(cfg);
            }
    return out;
}

GridOutcome run_grid(const EFBackboneConfig& backbone, const std::vector<EFSample>& train,
                     const std::vector<EFSample>& val, const EFGrid& grid, uint64_t seed) {
    auto configs = enumerate_grid(grid, seed);
    if (configs.empty()) throw InvalidConfig("hyperparameter grid is empty");
    GridOutcome out;
    for (size_t i = 0; i < configs.size(); ++i) {
        auto model = build_ef_model(backbone, derive_seed(seed, /*stream=*/3));
        auto result = train_ef(model, train, val, configs[i]);
        out.val_mses.push_back(result.best_val_mse);
        if (!out.best_model || result.best_val_mse < out.best_result.best_val_mse) {
            out.best_model = model;
            out.best_config = configs[i];
            out.best_result = result;
            out.best_index = i;
        }
    }
    return out;
}

void save_ef_model(EFRegressor& model, const nlohmann::json& provenance,
                   const std::filesystem::path& path) {
    CheckpointData ckpt;
    ckpt.meta = nlohmann::json{{"schema_version", 1},
                               {"kind", "ef_regressor"},
                               {"config", model->config().to_json()},
                               {"provenance", provenance}};
    for (const auto& [name, p] : collect_named_params("ef.", *model))
        ckpt.add(name, p.clone());
    write_checkpoint(path, ckpt);
}

LoadedEFModel load_ef_model(const std::filesystem::path& path) {
    auto ckpt = read_checkpoint(path);
    if (ckpt.meta.value("kind", "") != "ef_regressor")
        throw ParseError(path.string() + " is not an EF regressor file");
    LoadedEFModel out;
    out.config = EFBackboneConfig::from_json(ckpt.meta.at("config"));
    out.provenance = ckpt.meta.value("provenance", nlohmann::json::object());
    out.model = EFRegressor(out.config);
    restore_named_params(ckpt.tensors, "ef.", *out.model);
    out.model->eval();
    return out;
}

EFReport compute_metrics(const std::vector<double>& preds, const std::vector<double>& targets) {
    if (preds.size() != targets.size())
        throw LengthMismatch("prediction and target counts differ");
    if (preds.size() < 2) throw LengthMismatch("metrics need at least 2 cases");
    const double n = static_cast<double>(targets.size());
    double mean_t = 0.0;
    for (double t : targets) mean_t += t;
    mean_t /= n;
    double ss_res = 0.0, ss_tot = 0.0, abs_sum = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - targets[i];
        ss_res += d * d;
        abs_sum += std::abs(d);
        ss_tot += (targets[i] - mean_t) * (targets[i] - mean_t);
    }
    if (ss_tot == 0.0) throw DegenerateTargets("R^2 undefined: all targets identical");
    EFReport report;
    report.r2 = 1.0 - ss_res / ss_tot;
    report.mae = abs_sum / n;
    report.rmse = std::sqrt(ss_res / n);
    return report;
}

std::string EFReport::to_table() const {
    std::ostringstream os;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "r2=%.4f mae=%.3f rmse=%.3f (n=%zu)\n", r2, mae, rmse,
                  rows.size());
    os << buf;
    os << "case_id          ef_pred   ef_true\n";
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%-16s %7.2f   %7.2f\n", row.case_id.c_str(), row.ef_pred,
                      row.ef_true);
        os << buf;
    }
    return os.str();
}

nlohmann::json EFReport::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& row : rows)
        rows_json.push_back(
            {{"case_id", row.case_id}, {"ef_pred", row.ef_pred}, {"ef_true", row.ef_true}});
    return nlohmann::json{{"r2", r2}, {"mae", mae}, {"rmse", rmse}, {"cases", rows_json}};
}

const char* to_string(EFMode m) { return m == EFMode::single_plane ? "single_plane" : "biplane"; }

EFMode ef_mode_from_string(const std::string& s) {
    if (s == "single_plane") return EFMode::single_plane;
    if (s == "biplane") return EFMode::biplane;
    throw ParseError("unknown EF mode: " + s);
}

EFReport evaluate_ef(EFRegressor& model, const std::vector<CaseRecord>& cases, EFMode mode) {
    std::vector<double> preds, targets;
    std::vector<EFReport::Row> rows;
    for (const auto& rec : cases) {
        if (mode == EFMode::biplane && !rec.a2c) continue;
        double pred = mode == EFMode::single_plane ? predict_ef(model, rec.a4c)
                                                   : predict_biplane(model, rec.a4c, *rec.a2c);
        pred = std::clamp(pred, 0.0, 100.0);
        preds.push_back(pred);
        targets.push_back(rec.ef_true);
        rows.push_back({rec.a4c.case_id, pred, rec.ef_true});
    }
    auto report = compute_metrics(preds, targets);
    report.rows = std::move(rows);
    return report;
}

}  // namespace echosynth
