#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "echosynth/clip.hpp"
#include "echosynth/control.hpp"
#include "echosynth/dataset.hpp"
#include "echosynth/ef.hpp"
#include "echosynth/schedule.hpp"
#include "echosynth/unet.hpp"

namespace echosynth {

constexpr int64_t kCandidatesPerCase = 18;
constexpr int64_t kSelectedPerCase = 3;

struct Candidate {
    int64_t sample_index = 0;
    double ef_pred = 0.0;     // unclamped prediction on the synthetic clip
    double abs_error = 0.0;   // |ef_pred - ef_true of the conditioning case|
    EchoClip clip;            // synthetic A2C
    std::string path;         // set once the clip has been written to disk
};

struct CandidateRanking {
    std::string case_id;
    double ef_true = 0.0;
    std::vector<Candidate> candidates;
    std::vector<int64_t> selected;  // sample indices, filled by select_top_k
};

// Samples n synthetic A2C clips conditioned on the case's A4C view, scores
// each with the EF model and records |ef_pred - ef_true|. Candidate i draws
// its noise from derive_seed(seed, i), so reruns with the same settings are
// bit-identical and the noise streams do not depend on batching. batch_size
// bounds how many candidates share one denoiser evaluation; changing it
// perturbs results only at float rounding level (batched conv kernels reduce
// in a different order than solo ones).
CandidateRanking generate_candidates(const CaseRecord& cs, DenoiserNet& host,
                                     ControlNetBranch& branch, const NoiseSchedule& schedule,
                                     EFRegressor& ef_model, int64_t n, uint64_t seed,
                                     int64_t batch_size = 6);

// Keeps the k smallest abs_error candidates, ties broken by ascending
// sample_index; k larger than the candidate count keeps everything. Pure.
CandidateRanking select_top_k(CandidateRanking ranking, int64_t k);

// Writes the selected candidates of a ranking to dir as clip containers,
// filling each Candidate::path (relative to dir). Returns the paths.
std::vector<std::string> write_selected(CandidateRanking& ranking,
                                        const std::filesystem::path& dir);

enum class AugmentMode { synthetic_only, real_plus_synthetic };
const char* to_string(AugmentMode m);
AugmentMode augment_mode_from_string(const std::string& s);

// Builds the augmented training manifest: every train-split case is paired
// with each of its selected synthetic A2C clips (k pairs per case);
// real_plus_synthetic additionally keeps the real pair. val/test records
// pass through untouched — synthetic clips never enter those splits.
// Throws MissingSelection when a train case has no selected candidates, and
// MissingArtifact when a selected candidate was never written to disk.
DatasetManifest build_augmented_manifest(const DatasetManifest& base,
                                         const std::vector<CandidateRanking>& rankings,
                                         AugmentMode mode);

// Per-case table of candidate errors and selections, structured text.
std::string curation_report(const std::vector<CandidateRanking>& rankings);

}  // namespace echosynth
