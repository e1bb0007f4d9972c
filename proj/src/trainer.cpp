#include "echosynth/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>

#include "echosynth/adam.hpp"
#include "echosynth/diffusion.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

const char* to_string(TrainPhase p) {
    return p == TrainPhase::unconditional ? "unconditional" : "conditional";
}

TrainPhase train_phase_from_string(const std::string& s) {
    if (s == "unconditional") return TrainPhase::unconditional;
    if (s == "conditional") return TrainPhase::conditional;
    throw ParseError("unknown training phase: " + s);
}

nlohmann::json TrainConfig::to_json() const {
    return nlohmann::json{{"phase", to_string(phase)},
                          {"max_iters", max_iters},
                          {"batch_size", batch_size},
                          {"lr_max", lr_max},
                          {"lr_min", lr_min},
                          {"lr_schedule", "cosine_annealing"},
                          {"warmup_iters", warmup_iters},
                          {"freeze_host", freeze_host},
                          {"seed", seed},
                          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.phase = train_phase_from_string(j.at("phase").get<std::string>());
    cfg.max_iters = j.at("max_iters").get<int64_t>();
    cfg.batch_size = j.at("batch_size").get<int64_t>();
    cfg.lr_max = j.at("lr_max").get<double>();
    cfg.lr_min = j.at("lr_min").get<double>();
    const auto sched = j.at("lr_schedule").get<std::string>();
    if (sched != "cosine_annealing") throw ParseError("unknown lr_schedule: " + sched);
    cfg.warmup_iters = j.at("warmup_iters").get<int64_t>();
    cfg.freeze_host = j.at("freeze_host").get<bool>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
    return cfg;
}

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.max_iters < 1) throw InvalidConfig("max_iters must be >= 1");
    if (cfg.batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
    if (!(cfg.lr_min <= cfg.lr_max)) throw InvalidConfig("lr_min must not exceed lr_max");
    if (cfg.lr_max <= 0.0) throw InvalidConfig("lr_max must be positive");
    if (cfg.warmup_iters < 0 || cfg.warmup_iters >= cfg.max_iters)
        throw InvalidConfig("warmup_iters must lie in [0, max_iters)");
    if (cfg.checkpoint_every < 0) throw InvalidConfig("checkpoint_every must be >= 0");
}

double lr_at(const TrainConfig& cfg, int64_t iter) {
    if (iter < 0 || iter >= cfg.max_iters)
        throw OutOfBounds("iter " + std::to_string(iter) + " outside [0, max_iters)");
    if (cfg.warmup_iters > 0 && iter <= cfg.warmup_iters)
        return cfg.lr_max * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
    const double progress = static_cast<double>(iter - cfg.warmup_iters) /
                            static_cast<double>(cfg.max_iters - cfg.warmup_iters);
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * progress));
}

nlohmann::json schedule_to_meta(const NoiseSchedule& s) {
    return nlohmann::json{{"kind", to_string(s.kind)},
                          {"T", s.T},
                          {"beta_start", s.beta_start},
                          {"beta_end", s.beta_end}};
}

NoiseSchedule schedule_from_meta(const nlohmann::json& meta) {
    // Accepts either a full checkpoint meta block or the schedule object itself.
    const auto& s = meta.contains("schedule") ? meta.at("schedule") : meta;
    return make_schedule(schedule_kind_from_string(s.at("kind").get<std::string>()),
                         s.at("T").get<int64_t>(), s.at("beta_start").get<double>(),
                         s.at("beta_end").get<double>());
}

namespace {

// Training accepts any clip geometry that matches the model, not only the
// canonical 16x1x64x64 pipeline shape (tests exercise tiny nets).
void check_clip_matches(const EchoClip& clip, const UNetConfig& cfg) {
    const auto& f = clip.frames;
    if (!f.defined() || f.dim() != 4 || f.size(0) != cfg.frames || f.size(1) != cfg.in_channels ||
        f.size(2) != cfg.input_size || f.size(3) != cfg.input_size ||
        f.scalar_type() != torch::kFloat32) {
        throw ShapeMismatch("clip '" + clip.case_id + "' does not match the model geometry [" +
                            std::to_string(cfg.frames) + ", " + std::to_string(cfg.in_channels) + ", " +
                            std::to_string(cfg.input_size) + ", " + std::to_string(cfg.input_size) + "]");
    }
    if (f.min().item<double>() < -1.0 || f.max().item<double>() > 1.0)
        throw ShapeMismatch("clip '" + clip.case_id + "' has values outside [-1, 1]");
}

std::string checkpoint_name(int64_t iteration) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.esck", static_cast<long long>(iteration));
    return buf;
}

CheckpointData build_checkpoint(const TrainConfig& cfg, const NoiseSchedule& schedule,
                                int64_t iteration, DenoiserNet& host, ControlNetBranch* branch,
                                const Adam& opt, const torch::Generator& gen,
                                const std::vector<double>& losses) {
    CheckpointData ckpt;
    ckpt.meta = nlohmann::json{{"schema_version", kCheckpointSchemaVersion},
                               {"phase", to_string(cfg.phase)},
                               {"iteration", iteration},
                               {"has_branch", branch != nullptr},
                               {"unet", host->config().to_json()},
                               {"schedule", schedule_to_meta(schedule)},
                               {"train_config", cfg.to_json()}};
    if (branch) ckpt.meta["cond_channels"] = (*branch)->cond_channels();
    torch::NoGradGuard guard;
    for (const auto& [name, p] : collect_named_params("host.", *host))
        ckpt.add(name, p.clone());
    if (branch)
        for (const auto& [name, p] : collect_named_params("branch.", **branch))
            ckpt.add(name, p.clone());
    for (const auto& [name, t] : opt.state_tensors()) ckpt.add(name, t.clone());
    ckpt.add("rng_state", gen.get_state().clone());
    auto hist = losses.empty()
                    ? torch::empty({0}, torch::kFloat64)
                    : torch::from_blob(const_cast<double*>(losses.data()),
                                       {static_cast<int64_t>(losses.size())}, torch::kFloat64)
                          .clone();
    ckpt.add("loss_history", hist);
    return ckpt;
}

// Everything shared between the two phases: batching, the iteration loop,
// optimizer stepping, checkpoint plumbing and resume.
TrainOutcome run_training(const TrainConfig& cfg, const NoiseSchedule& schedule, int64_t n_items,
                          const torch::Tensor& x0_all,  // [n, C, T, H, W]
                          DenoiserNet& host, ControlNetBranch* branch, NamedParams trainables,
                          const std::function<torch::Tensor(const torch::Tensor& x_t,
                                                            const torch::Tensor& t,
                                                            const torch::Tensor& idx)>& predict,
                          const std::filesystem::path& checkpoint_dir,
                          const CheckpointData* resume, const TrainHooks& hooks) {
    validate_train_config(cfg);
    if (n_items == 0) throw DataEmpty("training dataset is empty");

    Adam opt(std::move(trainables));
    auto gen = make_generator(derive_seed(cfg.seed, /*stream=*/1));
    std::vector<double> losses;
    int64_t start_iter = 0;

    if (resume) {
        if (resume->meta.at("phase").get<std::string>() != to_string(cfg.phase))
            throw ParseError("checkpoint phase does not match the training phase");
        if (resume->meta.at("schedule").at("T").get<int64_t>() != schedule.T)
            throw ParseError("checkpoint schedule does not match");
        load_model_state(*resume, host, branch);
        opt.load_state(resume->tensors);
        const auto* rng = resume->find("rng_state");
        if (!rng) throw ParseError("checkpoint is missing the RNG state");
        gen.set_state(*rng);
        start_iter = resume->meta.at("iteration").get<int64_t>();
        const auto* hist = resume->find("loss_history");
        if (hist)
            for (int64_t i = 0; i < hist->numel(); ++i)
                losses.push_back(hist->accessor<double, 1>()[i]);
    }

    if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);
    host->train();
    if (branch) (*branch)->train();

    TrainOutcome out;
    for (int64_t iter = start_iter; iter < cfg.max_iters; ++iter) {
        auto idx = torch::randint(0, n_items, {cfg.batch_size}, gen, torch::kInt64);
        auto t = torch::randint(1, schedule.T + 1, {cfg.batch_size}, gen, torch::kInt64);
        auto x0 = x0_all.index_select(0, idx);
        auto eps = torch::randn(x0.sizes(), gen, x0.options());
        auto x_t = forward_diffuse_batch(x0, t, eps, schedule);

        opt.zero_grad();
        auto eps_hat = predict(x_t, t, idx);
        auto loss = noise_prediction_loss(eps_hat, eps);
        const double loss_val = loss.item<double>();
        if (!std::isfinite(loss_val))
            throw NonFiniteLoss("iteration " + std::to_string(iter) +
                                " produced loss " + std::to_string(loss_val));
        loss.backward();
        const double lr = lr_at(cfg, iter);
        opt.step(lr);
        losses.push_back(loss_val);
        if (hooks.on_step) hooks.on_step(iter, loss_val, lr);

        const bool periodic = cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0;
        if (periodic && !checkpoint_dir.empty()) {
            auto ckpt = build_checkpoint(cfg, schedule, iter + 1, host, branch, opt, gen, losses);
            write_checkpoint(checkpoint_dir / checkpoint_name(iter + 1), ckpt);
        }
    }

    out.losses = std::move(losses);
    out.checkpoint =
        build_checkpoint(cfg, schedule, cfg.max_iters, host, branch, opt, gen, out.losses);
    if (!checkpoint_dir.empty())
        write_checkpoint(checkpoint_dir / "checkpoint_final.esck", out.checkpoint);
    return out;
}

}  // namespace

TrainOutcome train_unconditional(DenoiserNet& net, const std::vector<EchoClip>& clips,
                                 const NoiseSchedule& schedule, const TrainConfig& cfg,
                                 const std::filesystem::path& checkpoint_dir,
                                 const CheckpointData* resume, const TrainHooks& hooks) {
    if (cfg.phase != TrainPhase::unconditional)
        throw InvalidConfig("train_unconditional requires phase=unconditional");
    if (clips.empty()) throw DataEmpty("no clips to train on");
    std::vector<torch::Tensor> stacked;
    for (const auto& clip : clips) {
        check_clip_matches(clip, net->config());
        stacked.push_back(clip_to_input(clip.frames));
    }
    auto x0_all = torch::cat(stacked, 0);

    auto predict = [&net](const torch::Tensor& x_t, const torch::Tensor& t,
                          const torch::Tensor&) { return net->forward(x_t, t); };
    return run_training(cfg, schedule, x0_all.size(0), x0_all, net, nullptr,
                        collect_named_params("host.", *net), predict, checkpoint_dir, resume, hooks);
}

TrainOutcome train_conditional(DenoiserNet& host, ControlNetBranch& branch,
                               const std::vector<CaseRecord>& pairs,
                               const NoiseSchedule& schedule, const TrainConfig& cfg,
                               const std::filesystem::path& checkpoint_dir,
                               const CheckpointData* resume, const TrainHooks& hooks) {
    if (cfg.phase != TrainPhase::conditional)
        throw InvalidConfig("train_conditional requires phase=conditional");
    if (pairs.empty()) throw DataEmpty("no paired cases to train on");
    std::vector<torch::Tensor> x0s, conds;
    for (const auto& rec : pairs) {
        if (!rec.a2c)
            throw DataEmpty("case " + rec.a4c.case_id + " has no A2C clip; conditional training needs pairs");
        check_clip_matches(rec.a4c, host->config());
        check_clip_matches(*rec.a2c, host->config());
        x0s.push_back(clip_to_input(rec.a2c->frames));
        conds.push_back(make_condition(rec.a4c.frames));
    }
    auto x0_all = torch::cat(x0s, 0);
    auto cond_all = torch::cat(conds, 0);

    NamedParams trainables = collect_named_params("branch.", *branch);
    if (!cfg.freeze_host) {
        for (auto& [name, p] : collect_named_params("host.", *host))
            trainables.emplace_back(name, p);
    } else {
        for (auto& p : host->parameters()) p.requires_grad_(false);
    }

    auto predict = [&host, &branch, &cond_all](const torch::Tensor& x_t, const torch::Tensor& t,
                                               const torch::Tensor& idx) {
        auto cond = cond_all.index_select(0, idx);
        return conditional_forward(host, branch, x_t, t, cond);
    };
    auto out = run_training(cfg, schedule, x0_all.size(0), x0_all, host, &branch,
                            std::move(trainables), predict, checkpoint_dir, resume, hooks);
    if (cfg.freeze_host)
        for (auto& p : host->parameters()) p.requires_grad_(true);
    return out;
}

void load_model_state(const CheckpointData& ckpt, DenoiserNet& host, ControlNetBranch* branch) {
    restore_named_params(ckpt.tensors, "host.", *host);
    if (branch) {
        if (!ckpt.meta.value("has_branch", false))
            throw ParseError("checkpoint has no control-branch parameters");
        restore_named_params(ckpt.tensors, "branch.", **branch);
    }
}

}  // namespace echosynth
