#include "commands.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "echosynth/checkpoint.hpp"
#include "echosynth/clip_io.hpp"
#include "echosynth/control.hpp"
#include "echosynth/curation.hpp"
#include "echosynth/dataset.hpp"
#include "echosynth/diffusion.hpp"
#include "echosynth/ef.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/metrics.hpp"
#include "echosynth/phantom.hpp"
#include "echosynth/rng.hpp"
#include "echosynth/trainer.hpp"
#include "echosynth/unet.hpp"
#include "export.hpp"

namespace echosynth::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- helpers

// Re-raises library parse errors for values that came out of a config file
// as ConfigError, so the process exits with the config status code.
template <typename Fn>
auto config_scope(const std::string& key, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

ViewFilter view_filter_from_config(const std::string& s, const std::string& key) {
    if (s == "a4c_only") return ViewFilter::a4c_only;
    if (s == "a2c_only") return ViewFilter::a2c_only;
    if (s == "both") return ViewFilter::both;
    throw ConfigError("config key '" + key + "': expected a4c_only | a2c_only | both, got '" + s +
                      "'");
}

json schedule_defaults() {
    json s;
    s["kind"] = "linear";  // linear | cosine | scaled_linear
    s["steps"] = 1000;
    s["beta_start"] = 1e-4;
    s["beta_end"] = 0.02;
    return s;
}

NoiseSchedule schedule_from_section(const json& s) {
    const auto kind = s.at("kind").get<std::string>();
    const int64_t steps = s.at("steps").get<int64_t>();
    if (kind == "scaled_linear") return make_scaled_linear_schedule(steps);
    return config_scope("schedule.kind", [&] {
        return make_schedule(schedule_kind_from_string(kind), steps,
                             s.at("beta_start").get<double>(), s.at("beta_end").get<double>());
    });
}

json diffusion_train_defaults(double lr_max, bool conditional) {
    json t;
    t["max_iters"] = 500;
    t["batch_size"] = 4;
    t["lr_max"] = lr_max;
    t["lr_min"] = 1e-7;
    t["warmup_iters"] = 10;
    t["checkpoint_every"] = 0;  // 0 writes only the final checkpoint
    if (conditional) t["freeze_host"] = false;
    return t;
}

TrainConfig train_config_from_section(const json& t, TrainPhase phase, uint64_t seed) {
    TrainConfig cfg;
    cfg.phase = phase;
    cfg.max_iters = t.at("max_iters").get<int64_t>();
    cfg.batch_size = t.at("batch_size").get<int64_t>();
    cfg.lr_max = t.at("lr_max").get<double>();
    cfg.lr_min = t.at("lr_min").get<double>();
    cfg.warmup_iters = t.at("warmup_iters").get<int64_t>();
    cfg.checkpoint_every = t.at("checkpoint_every").get<int64_t>();
    if (t.contains("freeze_host")) cfg.freeze_host = t.at("freeze_host").get<bool>();
    cfg.seed = seed;
    return cfg;
}

TrainHooks progress_hooks(const std::string& tag, int64_t max_iters) {
    TrainHooks hooks;
    const int64_t every = std::max<int64_t>(1, max_iters / 20);
    hooks.on_step = [tag, every, max_iters](int64_t iter, double loss, double lr) {
        if (iter % every == 0 || iter + 1 == max_iters) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "[%s] iter %lld/%lld  loss %.6f  lr %.3g", tag.c_str(),
                          static_cast<long long>(iter + 1), static_cast<long long>(max_iters), loss,
                          lr);
            log_line(buf);
        }
    };
    return hooks;
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw MissingArtifact("cannot write " + path.string());
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    if (!out) throw MissingArtifact("cannot write " + path.string());
}

double smoothed_tail(const std::vector<double>& losses, size_t window = 50) {
    if (losses.empty()) return 0.0;
    const size_t n = std::min(window, losses.size());
    return std::accumulate(losses.end() - n, losses.end(), 0.0) / static_cast<double>(n);
}

// Rewrites a manifest-relative path so it still resolves from new_base.
std::string rebase_path(const fs::path& old_base, const std::string& rel, const fs::path& new_base) {
    const fs::path abs = fs::weakly_canonical(old_base / rel);
    std::error_code ec;
    const fs::path r = fs::relative(abs, fs::weakly_canonical(new_base), ec);
    if (ec || r.empty()) return abs.generic_string();
    return r.generic_string();
}

// A diffusion checkpoint rebuilt into usable modules.
struct LoadedGenerator {
    CheckpointData ckpt;
    DenoiserNet host{nullptr};
    ControlNetBranch branch{nullptr};  // stays null for phase-1 checkpoints
    NoiseSchedule schedule;
    std::string phase;
};

LoadedGenerator load_generator(const fs::path& path) {
    LoadedGenerator g;
    g.ckpt = read_checkpoint(path);
    g.phase = g.ckpt.meta.at("phase").get<std::string>();
    const auto cfg = UNetConfig::from_json(g.ckpt.meta.at("unet"));
    g.host = build_unet(cfg, /*seed=*/0);
    if (g.ckpt.meta.value("has_branch", false)) {
        const int64_t cond_ch = g.ckpt.meta.at("cond_channels").get<int64_t>();
        g.branch = ControlNetBranch(cfg, cond_ch);
    }
    load_model_state(g.ckpt, g.host, g.branch.is_empty() ? nullptr : &g.branch);
    g.schedule = schedule_from_meta(g.ckpt.meta);
    g.host->eval();
    if (!g.branch.is_empty()) g.branch->eval();
    return g;
}

int64_t positive_int(const json& section, const std::string& key, const std::string& path) {
    const int64_t v = section.at(key).get<int64_t>();
    if (v < 1) throw ConfigError("config key '" + path + "' must be >= 1");
    return v;
}

}  // namespace

// ---------------------------------------------------------------- phantom-gen

namespace {

json phantom_gen_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    json ds;
    ds["n_train"] = 450;
    ds["n_val"] = 50;
    ds["n_test"] = 50;
    ds["ef_lo"] = 20.0;
    ds["ef_hi"] = 75.0;
    ds["noise_sigma"] = 0.12;
    ds["area_ed_lo"] = 550.0;
    ds["area_ed_hi"] = 800.0;
    d["dataset"] = ds;
    return d;
}

}  // namespace

void cmd_phantom_gen(const CliArgs& args) {
    auto ctx = make_run_context("phantom-gen", args, phantom_gen_defaults());
    const auto& ds = ctx.config.at("dataset");

    PhantomDatasetConfig cfg;
    cfg.n_train = ds.at("n_train").get<int64_t>();
    cfg.n_val = ds.at("n_val").get<int64_t>();
    cfg.n_test = ds.at("n_test").get<int64_t>();
    cfg.ef_lo = ds.at("ef_lo").get<double>();
    cfg.ef_hi = ds.at("ef_hi").get<double>();
    cfg.noise_sigma = ds.at("noise_sigma").get<double>();
    cfg.area_ed_lo = ds.at("area_ed_lo").get<double>();
    cfg.area_ed_hi = ds.at("area_ed_hi").get<double>();
    cfg.seed = static_cast<int64_t>(ctx.seed);

    log_line("[phantom-gen] generating " + std::to_string(cfg.n_train) + "/" +
             std::to_string(cfg.n_val) + "/" + std::to_string(cfg.n_test) +
             " train/val/test cases into " + ctx.out_dir.string());
    const auto manifest = generate_phantom_dataset(cfg, ctx.out_dir);

    json summary;
    summary["manifest"] = "manifest.json";
    summary["counts"] = {{"train", manifest.count(Split::train)},
                         {"val", manifest.count(Split::val)},
                         {"test", manifest.count(Split::test)}};
    summary["ef_range"] = {cfg.ef_lo, cfg.ef_hi};
    write_summary(ctx, summary);
    log_line("[phantom-gen] wrote " + (ctx.out_dir / "manifest.json").string());
}

// ---------------------------------------------------------------- train-uncond

namespace {

json train_uncond_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    d["data"] = {{"manifest", ""}, {"split", "train"}, {"views", "a2c_only"}};
    d["model"] = UNetConfig{}.to_json();
    d["schedule"] = schedule_defaults();
    d["train"] = diffusion_train_defaults(/*lr_max=*/1e-4, /*conditional=*/false);
    d["resume"] = nullptr;  // optional path to a phase-1 checkpoint
    return d;
}

}  // namespace

void cmd_train_uncond(const CliArgs& args) {
    auto ctx = make_run_context("train-uncond", args, train_uncond_defaults());
    const auto& data = ctx.config.at("data");

    const auto manifest_path =
        resolve_input(ctx, data.at("manifest").get<std::string>(), "data.manifest");
    const auto manifest = load_manifest(manifest_path);
    const auto split = config_scope("data.split", [&] {
        return split_from_string(data.at("split").get<std::string>());
    });
    const auto cases = load_split(manifest_path, manifest, split);
    const auto filter =
        view_filter_from_config(data.at("views").get<std::string>(), "data.views");
    const auto clips = collect_clips(cases, filter);
    log_line("[train-uncond] " + std::to_string(clips.size()) + " clips from " +
             manifest_path.string());

    const auto model_cfg = config_scope("model", [&] {
        return UNetConfig::from_json(ctx.config.at("model"));
    });
    const auto schedule = schedule_from_section(ctx.config.at("schedule"));
    const auto cfg =
        train_config_from_section(ctx.config.at("train"), TrainPhase::unconditional, ctx.seed);

    CheckpointData resume_data;
    const CheckpointData* resume = nullptr;
    if (!ctx.config.at("resume").is_null()) {
        resume_data = read_checkpoint(
            resolve_input(ctx, ctx.config.at("resume").get<std::string>(), "resume"));
        if (resume_data.meta.at("unet") != model_cfg.to_json())
            throw ConfigError("the model section does not match the resume checkpoint");
        resume = &resume_data;
    }

    auto net = build_unet(model_cfg, derive_seed(ctx.seed, 0));
    const auto outcome = train_unconditional(net, clips, schedule, cfg, ctx.out_dir / "checkpoints",
                                             resume, progress_hooks("train-uncond", cfg.max_iters));

    write_json_file(ctx.out_dir / "loss_history.json", json{{"losses", outcome.losses}});
    json summary;
    summary["checkpoint"] = "checkpoints/checkpoint_final.esck";
    summary["loss_history"] = "loss_history.json";
    summary["iterations"] = cfg.max_iters;
    summary["clips"] = static_cast<int64_t>(clips.size());
    summary["parameters"] = parameter_count(*net);
    summary["final_loss"] = outcome.losses.empty() ? 0.0 : outcome.losses.back();
    summary["smoothed_final_loss"] = smoothed_tail(outcome.losses);
    write_summary(ctx, summary);
}

// ---------------------------------------------------------------- train-control

namespace {

json train_control_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    d["data"] = {{"manifest", ""}, {"split", "train"}};
    d["host_checkpoint"] = "";  // phase-1 checkpoint; fixes model + schedule
    // Paper phase 2: cosine annealing from 5e-5 with a warmup of 10.
    d["train"] = diffusion_train_defaults(/*lr_max=*/5e-5, /*conditional=*/true);
    d["resume"] = nullptr;  // optional path to a phase-2 checkpoint
    return d;
}

}  // namespace

void cmd_train_control(const CliArgs& args) {
    auto ctx = make_run_context("train-control", args, train_control_defaults());
    const auto& data = ctx.config.at("data");

    const auto manifest_path =
        resolve_input(ctx, data.at("manifest").get<std::string>(), "data.manifest");
    const auto manifest = load_manifest(manifest_path);
    const auto split = config_scope("data.split", [&] {
        return split_from_string(data.at("split").get<std::string>());
    });
    auto cases = load_split(manifest_path, manifest, split);
    std::vector<CaseRecord> pairs;
    for (auto& c : cases)
        if (c.a2c) pairs.push_back(std::move(c));
    if (pairs.size() < cases.size())
        log_line("[train-control] skipped " + std::to_string(cases.size() - pairs.size()) +
                 " single-view cases");
    log_line("[train-control] " + std::to_string(pairs.size()) + " A4C/A2C pairs from " +
             manifest_path.string());

    const auto host_ckpt = read_checkpoint(resolve_input(
        ctx, ctx.config.at("host_checkpoint").get<std::string>(), "host_checkpoint"));
    if (host_ckpt.meta.at("phase").get<std::string>() != "unconditional")
        throw ConfigError("host_checkpoint must come from phase-1 (train-uncond)");
    const auto model_cfg = UNetConfig::from_json(host_ckpt.meta.at("unet"));
    const auto schedule = schedule_from_meta(host_ckpt.meta);

    auto host = build_unet(model_cfg, derive_seed(ctx.seed, 0));
    load_model_state(host_ckpt, host);
    auto branch = make_control_branch(host, /*cond_channels=*/2, derive_seed(ctx.seed, 1));

    const auto cfg =
        train_config_from_section(ctx.config.at("train"), TrainPhase::conditional, ctx.seed);

    CheckpointData resume_data;
    const CheckpointData* resume = nullptr;
    if (!ctx.config.at("resume").is_null()) {
        resume_data = read_checkpoint(
            resolve_input(ctx, ctx.config.at("resume").get<std::string>(), "resume"));
        if (resume_data.meta.at("unet") != model_cfg.to_json())
            throw ConfigError("the resume checkpoint does not match host_checkpoint's model");
        resume = &resume_data;
    }

    const auto outcome = train_conditional(host, branch, pairs, schedule, cfg,
                                           ctx.out_dir / "checkpoints", resume,
                                           progress_hooks("train-control", cfg.max_iters));

    write_json_file(ctx.out_dir / "loss_history.json", json{{"losses", outcome.losses}});
    json summary;
    summary["checkpoint"] = "checkpoints/checkpoint_final.esck";
    summary["loss_history"] = "loss_history.json";
    summary["iterations"] = cfg.max_iters;
    summary["pairs"] = static_cast<int64_t>(pairs.size());
    summary["freeze_host"] = cfg.freeze_host;
    summary["final_loss"] = outcome.losses.empty() ? 0.0 : outcome.losses.back();
    summary["smoothed_final_loss"] = smoothed_tail(outcome.losses);
    write_summary(ctx, summary);
}

// ---------------------------------------------------------------- sample

namespace {

json sample_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    d["checkpoint"] = "";
    // data is only consulted for conditional checkpoints.
    d["data"] = {{"manifest", nullptr}, {"split", "test"}, {"case_limit", 0}};
    d["sampling"] = {{"count", 4}, {"per_case", 1}, {"batch_size", 4}};
    d["export"] = {{"grid", true}, {"animations", true}, {"frame_rate", 8.0}};
    return d;
}

struct PlannedSample {
    uint64_t seed = 0;
    std::string name;          // clip file stem
    const CaseRecord* source = nullptr;  // null for unconditional draws
};

}  // namespace

void cmd_sample(const CliArgs& args) {
    auto ctx = make_run_context("sample", args, sample_defaults());
    auto gen = load_generator(
        resolve_input(ctx, ctx.config.at("checkpoint").get<std::string>(), "checkpoint"));
    const int64_t batch_size = positive_int(ctx.config.at("sampling"), "batch_size",
                                            "sampling.batch_size");

    // Plan every draw up front: one derived seed per clip, so the set does
    // not depend on how draws are grouped into batches.
    std::vector<PlannedSample> plan;
    std::vector<CaseRecord> cases;
    if (gen.branch.is_empty()) {
        const int64_t count = positive_int(ctx.config.at("sampling"), "count", "sampling.count");
        for (int64_t i = 0; i < count; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "sample_%03lld", static_cast<long long>(i));
            plan.push_back({derive_seed(ctx.seed, static_cast<uint64_t>(i)), name, nullptr});
        }
        log_line("[sample] unconditional checkpoint: drawing " + std::to_string(count) +
                 " clips");
    } else {
        const auto& data = ctx.config.at("data");
        if (data.at("manifest").is_null())
            throw ConfigError("data.manifest is required for a conditional checkpoint");
        const auto manifest_path =
            resolve_input(ctx, data.at("manifest").get<std::string>(), "data.manifest");
        const auto manifest = load_manifest(manifest_path);
        const auto split = config_scope("data.split", [&] {
            return split_from_string(data.at("split").get<std::string>());
        });
        cases = load_split(manifest_path, manifest, split);
        const int64_t limit = data.at("case_limit").get<int64_t>();
        if (limit < 0) throw ConfigError("config key 'data.case_limit' must be >= 0");
        if (limit > 0 && static_cast<int64_t>(cases.size()) > limit) cases.resize(limit);
        const int64_t per_case =
            positive_int(ctx.config.at("sampling"), "per_case", "sampling.per_case");
        for (size_t ci = 0; ci < cases.size(); ++ci) {
            const uint64_t case_seed = derive_seed(ctx.seed, ci);
            for (int64_t j = 0; j < per_case; ++j) {
                char name[96];
                std::snprintf(name, sizeof(name), "%s_s%02lld", cases[ci].a4c.case_id.c_str(),
                              static_cast<long long>(j));
                plan.push_back({derive_seed(case_seed, static_cast<uint64_t>(j)), name,
                                &cases[ci]});
            }
        }
        log_line("[sample] conditional checkpoint: " + std::to_string(cases.size()) +
                 " cases x " + std::to_string(per_case) + " clips");
    }

    torch::NoGradGuard guard;
    const std::vector<int64_t> item_shape = {kClipChannels, kClipFrames, kClipSize, kClipSize};
    fs::create_directories(ctx.out_dir / "clips");
    std::vector<EchoClip> produced;
    json clip_rows = json::array();

    for (size_t start = 0; start < plan.size(); start += static_cast<size_t>(batch_size)) {
        const size_t stop = std::min(start + static_cast<size_t>(batch_size), plan.size());
        std::vector<torch::Generator> gens;
        for (size_t i = start; i < stop; ++i) gens.push_back(make_generator(plan[i].seed));

        torch::Tensor batch;
        if (gen.branch.is_empty()) {
            auto denoiser = [&](const torch::Tensor& x_t, int64_t t) {
                return gen.host->forward(x_t, torch::scalar_tensor(t, torch::kInt64));
            };
            batch = sample_loop_batch(denoiser, gen.schedule, item_shape, gens);
        } else {
            std::vector<torch::Tensor> conds;
            for (size_t i = start; i < stop; ++i)
                conds.push_back(make_condition(plan[i].source->a4c.frames));
            auto cond = torch::cat(conds, 0);
            auto host = gen.host;
            auto branch = gen.branch;
            auto denoiser = [&, cond](const torch::Tensor& x_t, int64_t t) mutable {
                return conditional_forward(host, branch, x_t,
                                           torch::scalar_tensor(t, torch::kInt64), cond);
            };
            batch = sample_loop_batch(denoiser, gen.schedule, item_shape, gens);
        }

        for (size_t i = start; i < stop; ++i) {
            EchoClip clip;
            clip.frames = input_to_clip(batch.slice(0, i - start, i - start + 1));
            clip.view = View::a2c;
            clip.case_id = plan[i].source ? plan[i].source->a4c.case_id : plan[i].name;
            clip.frame_rate = plan[i].source ? plan[i].source->a4c.frame_rate : 0.0;
            const std::string rel = "clips/" + plan[i].name + ".ecl";
            write_clip(ctx.out_dir / rel, clip);
            clip_rows.push_back({{"name", plan[i].name}, {"path", rel}});
            produced.push_back(std::move(clip));
        }
        log_line("[sample] " + std::to_string(stop) + "/" + std::to_string(plan.size()) +
                 " clips done");
    }

    const auto& exp = ctx.config.at("export");
    json summary;
    summary["clips"] = clip_rows;
    summary["grid"] = nullptr;
    summary["animations"] = json::array();
    if (exp.at("grid").get<bool>() && !produced.empty()) {
        write_grid_sheet(ctx.out_dir / "grid.png", produced);
        summary["grid"] = "grid.png";
    }
    if (exp.at("animations").get<bool>()) {
        fs::create_directories(ctx.out_dir / "animations");
        const double fps = exp.at("frame_rate").get<double>();
        for (size_t i = 0; i < produced.size(); ++i) {
            const auto written = write_clip_animation(
                ctx.out_dir / "animations" / (plan[i].name + ".mkv"), produced[i], fps);
            summary["animations"].push_back(
                fs::relative(written, ctx.out_dir).generic_string());
        }
    }
    write_summary(ctx, summary);
}

// ---------------------------------------------------------------- curate

namespace {

json curate_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    d["data"] = {{"manifest", ""}};
    d["generator_checkpoint"] = "";  // phase-2 checkpoint
    d["ef_checkpoint"] = "";         // EF model used for ranking
    d["curation"] = {{"n_candidates", kCandidatesPerCase},
                     {"keep", kSelectedPerCase},
                     {"batch_size", 6},
                     {"mode", "synthetic_only"}};
    return d;
}

}  // namespace

void cmd_curate(const CliArgs& args) {
    auto ctx = make_run_context("curate", args, curate_defaults());
    const auto manifest_path = resolve_input(
        ctx, ctx.config.at("data").at("manifest").get<std::string>(), "data.manifest");
    const auto manifest = load_manifest(manifest_path);
    const fs::path base_dir = manifest_path.parent_path();

    auto gen = load_generator(resolve_input(
        ctx, ctx.config.at("generator_checkpoint").get<std::string>(), "generator_checkpoint"));
    if (gen.branch.is_empty())
        throw ConfigError("generator_checkpoint must come from phase-2 (train-control)");
    auto ef = load_ef_model(
        resolve_input(ctx, ctx.config.at("ef_checkpoint").get<std::string>(), "ef_checkpoint"));

    const auto& cur = ctx.config.at("curation");
    const int64_t n_candidates = positive_int(cur, "n_candidates", "curation.n_candidates");
    const int64_t keep = positive_int(cur, "keep", "curation.keep");
    const int64_t batch_size = positive_int(cur, "batch_size", "curation.batch_size");
    const auto mode = config_scope("curation.mode", [&] {
        return augment_mode_from_string(cur.at("mode").get<std::string>());
    });

    const auto cases = load_split(manifest_path, manifest, Split::train);
    log_line("[curate] " + std::to_string(cases.size()) + " train cases, " +
             std::to_string(n_candidates) + " candidates each, keeping " + std::to_string(keep));

    std::vector<CandidateRanking> rankings;
    json case_rows = json::array();
    for (size_t ci = 0; ci < cases.size(); ++ci) {
        auto ranking = generate_candidates(cases[ci], gen.host, gen.branch, gen.schedule, ef.model,
                                           n_candidates, derive_seed(ctx.seed, ci), batch_size);
        ranking = select_top_k(std::move(ranking), keep);
        write_selected(ranking, ctx.out_dir / "clips");
        double best = 0.0;
        for (auto& c : ranking.candidates) {
            // Selected clips are on disk now; drop the pixel data so a large
            // run does not hold every candidate in memory.
            if (!c.path.empty()) c.path = "clips/" + c.path;
            c.clip.frames = torch::Tensor();
        }
        if (!ranking.selected.empty()) {
            for (const auto& c : ranking.candidates)
                if (c.sample_index == ranking.selected.front()) best = c.abs_error;
        }
        case_rows.push_back({{"case_id", ranking.case_id},
                             {"selected", ranking.selected},
                             {"best_abs_error", best}});
        log_line("[curate] case " + std::to_string(ci + 1) + "/" + std::to_string(cases.size()) +
                 " (" + ranking.case_id + ") best |EF error| " + std::to_string(best));
        rankings.push_back(std::move(ranking));
    }

    // The augmented manifest lives in out_dir, so the base manifest's paths
    // must be rewritten to resolve from there before augmentation copies
    // them into the synthetic records.
    DatasetManifest rebased = manifest;
    for (auto& rec : rebased.records) {
        rec.a4c_path = rebase_path(base_dir, rec.a4c_path, ctx.out_dir);
        if (rec.a2c_path) rec.a2c_path = rebase_path(base_dir, *rec.a2c_path, ctx.out_dir);
    }
    const auto augmented = build_augmented_manifest(rebased, rankings, mode);
    save_manifest(augmented, ctx.out_dir / "manifest.json");
    write_text_file(ctx.out_dir / "curation_report.txt", curation_report(rankings));

    json summary;
    summary["manifest"] = "manifest.json";
    summary["report"] = "curation_report.txt";
    summary["mode"] = to_string(mode);
    summary["cases"] = case_rows;
    summary["counts"] = {{"train", augmented.count(Split::train)},
                         {"val", augmented.count(Split::val)},
                         {"test", augmented.count(Split::test)}};
    write_summary(ctx, summary);
}

// ---------------------------------------------------------------- train-ef

namespace {

json train_ef_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    d["data"] = {{"train_manifest", ""},
                 {"val_manifest", nullptr},  // defaults to train_manifest
                 {"train_split", "train"},
                 {"val_split", "val"},
                 {"views", "a4c_only"}};
    d["backbone"] = EFBackboneConfig{}.to_json();
    d["train"] = {{"batch_size", 8}, {"epochs", 50}, {"lr", 1e-3}};
    d["grid"] = false;  // true runs the full 3x3x3 paper grid (ignores train)
    return d;
}

}  // namespace

void cmd_train_ef(const CliArgs& args) {
    auto ctx = make_run_context("train-ef", args, train_ef_defaults());
    const auto& data = ctx.config.at("data");

    const auto train_manifest_path = resolve_input(
        ctx, data.at("train_manifest").get<std::string>(), "data.train_manifest");
    const auto train_manifest = load_manifest(train_manifest_path);
    const auto train_split = config_scope("data.train_split", [&] {
        return split_from_string(data.at("train_split").get<std::string>());
    });
    const auto val_split = config_scope("data.val_split", [&] {
        return split_from_string(data.at("val_split").get<std::string>());
    });
    const auto filter =
        view_filter_from_config(data.at("views").get<std::string>(), "data.views");

    const auto train_cases = load_split(train_manifest_path, train_manifest, train_split);
    std::vector<CaseRecord> val_cases;
    if (data.at("val_manifest").is_null()) {
        val_cases = load_split(train_manifest_path, train_manifest, val_split);
    } else {
        const auto val_manifest_path = resolve_input(
            ctx, data.at("val_manifest").get<std::string>(), "data.val_manifest");
        val_cases = load_split(val_manifest_path, load_manifest(val_manifest_path), val_split);
    }
    const auto train_samples = ef_samples_from_cases(train_cases, filter);
    const auto val_samples = ef_samples_from_cases(val_cases, filter);
    log_line("[train-ef] " + std::to_string(train_samples.size()) + " train / " +
             std::to_string(val_samples.size()) + " val samples (views: " +
             data.at("views").get<std::string>() + ")");

    const auto backbone = config_scope("backbone", [&] {
        return EFBackboneConfig::from_json(ctx.config.at("backbone"));
    });

    json provenance;
    provenance["data"] = data;
    provenance["seed"] = ctx.seed;
    provenance["samples"] = {{"train", train_samples.size()}, {"val", val_samples.size()}};

    EFRegressor model{nullptr};
    EFTrainResult result;
    json summary;
    if (ctx.config.at("grid").get<bool>()) {
        auto outcome = run_grid(backbone, train_samples, val_samples, EFGrid{}, ctx.seed);
        model = outcome.best_model;
        result = outcome.best_result;
        provenance["grid"] = {{"best_index", outcome.best_index},
                              {"best_config", outcome.best_config.to_json()},
                              {"val_mses", outcome.val_mses}};
        summary["grid"] = provenance["grid"];
        log_line("[train-ef] grid winner #" + std::to_string(outcome.best_index) + ": val MSE " +
                 std::to_string(result.best_val_mse));
    } else {
        EFTrainConfig tc;
        tc.batch_size = positive_int(ctx.config.at("train"), "batch_size", "train.batch_size");
        tc.epochs = positive_int(ctx.config.at("train"), "epochs", "train.epochs");
        tc.lr = ctx.config.at("train").at("lr").get<double>();
        tc.seed = ctx.seed;
        model = build_ef_model(backbone, derive_seed(ctx.seed, /*stream=*/3));
        result = train_ef(model, train_samples, val_samples, tc);
        provenance["train_config"] = tc.to_json();
        log_line("[train-ef] best epoch " + std::to_string(result.best_epoch) + ": val MSE " +
                 std::to_string(result.best_val_mse));
    }

    save_ef_model(model, provenance, ctx.out_dir / "ef_model.esck");
    write_json_file(ctx.out_dir / "val_curve.json",
                    json{{"val_curve", result.val_curve},
                         {"best_epoch", result.best_epoch},
                         {"best_val_mse", result.best_val_mse}});

    summary["model"] = "ef_model.esck";
    summary["val_curve"] = "val_curve.json";
    summary["best_epoch"] = result.best_epoch;
    summary["best_val_mse"] = result.best_val_mse;
    summary["train_samples"] = static_cast<int64_t>(train_samples.size());
    summary["val_samples"] = static_cast<int64_t>(val_samples.size());
    write_summary(ctx, summary);
}

// ---------------------------------------------------------------- evaluate

namespace {

json evaluate_defaults() {
    json d;
    d["schema_version"] = 1;
    d["seed"] = 0;
    d["out_dir"] = "";
    d["data"] = {{"manifest", ""}, {"split", "test"}};
    d["ef_rows"] = json::array();   // entries: {label, model, mode}
    d["video_metrics"] = nullptr;   // optional section, schema below
    return d;
}

json ef_row_defaults() {
    return json{{"label", ""}, {"model", ""}, {"mode", "single_plane"}};
}

json video_metrics_defaults() {
    json v;
    v["real_manifest"] = "";
    v["real_split"] = "test";
    v["synthetic_manifest"] = "";
    v["synthetic_split"] = "train";
    v["view"] = "a2c";
    v["feature_dim"] = 64;
    v["extractor_iters"] = 300;
    return v;
}

// The perfect-prediction stub: a diagnostics row whose predictions equal the
// ground truth, so the report machinery can be exercised without a model.
EFReport oracle_report(const std::vector<CaseRecord>& cases) {
    std::vector<double> ef(cases.size());
    std::vector<EFReport::Row> rows(cases.size());
    for (size_t i = 0; i < cases.size(); ++i) {
        ef[i] = cases[i].ef_true;
        rows[i] = {cases[i].a4c.case_id, cases[i].ef_true, cases[i].ef_true};
    }
    auto report = compute_metrics(ef, ef);
    report.rows = std::move(rows);
    return report;
}

struct ClipSets {
    std::vector<EchoClip> real;
    std::vector<EchoClip> synthetic;
    std::map<std::string, const EchoClip*> real_by_case;
};

ClipSets collect_metric_clips(const RunContext& ctx, const json& vm, View view) {
    ClipSets sets;
    const auto real_path = resolve_input(
        ctx, vm.at("real_manifest").get<std::string>(), "video_metrics.real_manifest");
    const auto real_split = config_scope("video_metrics.real_split", [&] {
        return split_from_string(vm.at("real_split").get<std::string>());
    });
    const auto synth_path = resolve_input(ctx, vm.at("synthetic_manifest").get<std::string>(),
                                          "video_metrics.synthetic_manifest");
    const auto synth_split = config_scope("video_metrics.synthetic_split", [&] {
        return split_from_string(vm.at("synthetic_split").get<std::string>());
    });

    for (const auto& c : load_split(real_path, load_manifest(real_path), real_split)) {
        if (c.provenance == Provenance::synthetic) continue;
        const EchoClip* clip = view == View::a4c ? &c.a4c : (c.a2c ? &*c.a2c : nullptr);
        if (clip) sets.real.push_back(*clip);
    }
    for (const auto& c : load_split(synth_path, load_manifest(synth_path), synth_split)) {
        if (c.provenance != Provenance::synthetic) continue;
        const EchoClip* clip = view == View::a4c ? &c.a4c : (c.a2c ? &*c.a2c : nullptr);
        if (clip) sets.synthetic.push_back(*clip);
    }
    for (const auto& clip : sets.real) sets.real_by_case[clip.case_id] = &clip;
    return sets;
}

json run_video_metrics(const RunContext& ctx, const json& section) {
    const auto vm = merge_config(video_metrics_defaults(), section, "video_metrics");
    const auto view = config_scope("video_metrics.view", [&] {
        return view_from_string(vm.at("view").get<std::string>());
    });
    auto sets = collect_metric_clips(ctx, vm, view);
    log_line("[evaluate] video metrics: " + std::to_string(sets.real.size()) + " real vs " +
             std::to_string(sets.synthetic.size()) + " synthetic clips");

    FeatureExtractorConfig fx_cfg;
    fx_cfg.feature_dim = positive_int(vm, "feature_dim", "video_metrics.feature_dim");
    const int64_t iters = positive_int(vm, "extractor_iters", "video_metrics.extractor_iters");
    const auto fx = train_feature_extractor(sets.real, fx_cfg, derive_seed(ctx.seed, 9001), iters);

    json out;
    out["real_clips"] = static_cast<int64_t>(sets.real.size());
    out["synthetic_clips"] = static_cast<int64_t>(sets.synthetic.size());
    out["ffd_frame"] =
        frechet_feature_distance(sets.real, sets.synthetic, fx, FeatureMode::per_frame);
    out["ffd_clip"] =
        frechet_feature_distance(sets.real, sets.synthetic, fx, FeatureMode::per_clip);

    // SSIM over case-matched pairs: each synthetic clip against the real
    // clip of the case it was conditioned on.
    double ssim_sum = 0.0;
    int64_t ssim_pairs = 0;
    for (const auto& s : sets.synthetic) {
        auto it = sets.real_by_case.find(s.case_id);
        if (it == sets.real_by_case.end()) continue;
        ssim_sum += ssim(s.frames, it->second->frames);
        ++ssim_pairs;
    }
    out["ssim_pairs"] = ssim_pairs;
    if (ssim_pairs > 0)
        out["ssim_mean"] = ssim_sum / static_cast<double>(ssim_pairs);
    else
        out["ssim_mean"] = nullptr;
    out["lpips"] = "out of scope (needs pretrained perceptual weights)";
    return out;
}

std::string video_metrics_table(const json& vm) {
    std::ostringstream os;
    char buf[160];
    os << "synthetic vs real video quality (self-trained feature extractor)\n";
    std::snprintf(buf, sizeof(buf), "%-10s %12.4f\n", "FFD-frame",
                  vm.at("ffd_frame").get<double>());
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-10s %12.4f\n", "FFD-clip", vm.at("ffd_clip").get<double>());
    os << buf;
    if (vm.at("ssim_mean").is_null()) {
        os << "SSIM              n/a (no case-matched pairs)\n";
    } else {
        std::snprintf(buf, sizeof(buf), "%-10s %12.4f   (mean over %lld case-matched pairs)\n",
                      "SSIM", vm.at("ssim_mean").get<double>(),
                      vm.at("ssim_pairs").get<long long>());
        os << buf;
    }
    os << "LPIPS      out of scope (needs pretrained perceptual weights)\n";
    return os.str();
}

}  // namespace

void cmd_evaluate(const CliArgs& args) {
    auto ctx = make_run_context("evaluate", args, evaluate_defaults());
    const auto& rows_cfg = ctx.config.at("ef_rows");
    if (!rows_cfg.is_array()) throw ConfigError("ef_rows must be an array");
    if (rows_cfg.empty() && ctx.config.at("video_metrics").is_null())
        throw ConfigError("nothing to do: provide ef_rows and/or video_metrics");

    std::vector<CaseRecord> cases;
    if (!rows_cfg.empty()) {
        const auto manifest_path = resolve_input(
            ctx, ctx.config.at("data").at("manifest").get<std::string>(), "data.manifest");
        const auto split = config_scope("data.split", [&] {
            return split_from_string(ctx.config.at("data").at("split").get<std::string>());
        });
        cases = load_split(manifest_path, load_manifest(manifest_path), split);
        log_line("[evaluate] " + std::to_string(cases.size()) + " cases in split '" +
                 to_string(split) + std::string("'"));
    }

    std::ostringstream table;
    table << "EF estimation\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-24s %-13s %8s %8s %8s\n", "label", "mode", "r2", "mae",
                  "rmse");
    table << buf;

    json row_summaries = json::array();
    std::vector<std::pair<std::string, EFReport>> reports;
    for (size_t i = 0; i < rows_cfg.size(); ++i) {
        const std::string where = "ef_rows[" + std::to_string(i) + "]";
        if (!rows_cfg[i].is_object()) throw ConfigError(where + " must be an object");
        const auto row = merge_config(ef_row_defaults(), rows_cfg[i], where);
        const auto label = row.at("label").get<std::string>();
        if (label.empty()) throw ConfigError(where + ".label is required");
        const auto mode = config_scope(where + ".mode", [&] {
            return ef_mode_from_string(row.at("mode").get<std::string>());
        });
        const auto model_ref = row.at("model").get<std::string>();

        EFReport report;
        if (model_ref == "oracle") {
            report = oracle_report(cases);
        } else {
            auto loaded = load_ef_model(resolve_input(ctx, model_ref, where + ".model"));
            report = evaluate_ef(loaded.model, cases, mode);
        }
        std::snprintf(buf, sizeof(buf), "%-24s %-13s %8.3f %8.3f %8.3f\n", label.c_str(),
                      to_string(mode), report.r2, report.mae, report.rmse);
        table << buf;
        json rs = report.to_json();
        rs["label"] = label;
        rs["mode"] = to_string(mode);
        rs["model"] = model_ref;
        row_summaries.push_back(std::move(rs));
        reports.emplace_back(label, std::move(report));
        log_line("[evaluate] " + label + ": mae " + std::to_string(reports.back().second.mae));
    }

    json vm_out = nullptr;
    if (!ctx.config.at("video_metrics").is_null())
        vm_out = run_video_metrics(ctx, ctx.config.at("video_metrics"));

    std::ostringstream full;
    full << table.str();
    for (const auto& [label, report] : reports)
        full << "\n== " << label << " ==\n" << report.to_table();
    if (!vm_out.is_null()) full << "\n" << video_metrics_table(vm_out);
    write_text_file(ctx.out_dir / "report.txt", full.str());

    json report_json;
    report_json["ef_rows"] = row_summaries;
    report_json["video_metrics"] = vm_out;
    write_json_file(ctx.out_dir / "report.json", report_json);

    json summary;
    summary["report"] = "report.txt";
    summary["report_json"] = "report.json";
    json brief = json::array();
    for (size_t i = 0; i < reports.size(); ++i)
        brief.push_back({{"label", reports[i].first},
                         {"r2", reports[i].second.r2},
                         {"mae", reports[i].second.mae},
                         {"rmse", reports[i].second.rmse}});
    summary["ef_rows"] = brief;
    summary["video_metrics"] = vm_out;
    write_summary(ctx, summary);
}

}  // namespace echosynth::cli
