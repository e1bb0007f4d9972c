#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "echosynth/checkpoint.hpp"
#include "echosynth/clip.hpp"
#include "echosynth/control.hpp"
#include "echosynth/schedule.hpp"
#include "echosynth/unet.hpp"

namespace echosynth {

enum class TrainPhase { unconditional, conditional };
const char* to_string(TrainPhase p);
TrainPhase train_phase_from_string(const std::string& s);

enum class LrSchedule { cosine_annealing };

struct TrainConfig {
    TrainPhase phase = TrainPhase::unconditional;
    int64_t max_iters = 500;
    int64_t batch_size = 4;
    double lr_max = 1e-4;
    double lr_min = 1e-7;
    LrSchedule lr_schedule = LrSchedule::cosine_annealing;
    int64_t warmup_iters = 10;
    bool freeze_host = false;   // conditional phase only: keep the U-Net fixed
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // 0 writes only the final checkpoint

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

void validate_train_config(const TrainConfig& cfg);

// Linear warmup 0 -> lr_max over warmup_iters, then cosine annealing from
// lr_max down to lr_min, which is reached at max_iters (one step past the
// last iteration). Continuous at the warmup boundary; iter must be in
// [0, max_iters).
double lr_at(const TrainConfig& cfg, int64_t iter);

struct TrainHooks {
    std::function<void(int64_t iter, double loss, double lr)> on_step;
};

struct TrainOutcome {
    std::vector<double> losses;  // one entry per completed iteration
    CheckpointData checkpoint;   // final state, identical to the file on disk
};

constexpr int kCheckpointSchemaVersion = 1;

// Phase 1: unconditional denoising on a set of clips. Every random draw
// (batch indices, timesteps, noise) comes from one generator stream seeded
// by cfg.seed, so fixed-seed runs are bitwise reproducible. checkpoint_dir
// may be empty to skip writing files. Passing `resume` (a checkpoint
// produced by this function) restores parameters, optimizer moments and the
// RNG mid-stream state, continuing the loss trajectory bitwise.
TrainOutcome train_unconditional(DenoiserNet& net, const std::vector<EchoClip>& clips,
                                 const NoiseSchedule& schedule, const TrainConfig& cfg,
                                 const std::filesystem::path& checkpoint_dir = {},
                                 const CheckpointData* resume = nullptr,
                                 const TrainHooks& hooks = {});

// Phase 2: conditional training with the control branch attached. Each step
// noises the A2C clip and conditions on the paired A4C clip plus its motion
// mask. The host U-Net stays trainable unless cfg.freeze_host is set.
TrainOutcome train_conditional(DenoiserNet& host, ControlNetBranch& branch,
                               const std::vector<CaseRecord>& pairs,
                               const NoiseSchedule& schedule, const TrainConfig& cfg,
                               const std::filesystem::path& checkpoint_dir = {},
                               const CheckpointData* resume = nullptr,
                               const TrainHooks& hooks = {});

// Restores model parameters from a training checkpoint. branch may be null
// for phase-1 checkpoints.
void load_model_state(const CheckpointData& ckpt, DenoiserNet& host, ControlNetBranch* branch = nullptr);

// Rebuilds the schedule recorded in a checkpoint's metadata.
NoiseSchedule schedule_from_meta(const nlohmann::json& meta);
nlohmann::json schedule_to_meta(const NoiseSchedule& s);

}  // namespace echosynth
