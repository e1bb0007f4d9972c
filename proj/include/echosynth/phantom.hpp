#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include "echosynth/clip.hpp"
#include "echosynth/dataset.hpp"

namespace echosynth {

enum class ViewGeometry { four_chamber_like, two_chamber_like };

// A pulsating-ellipse chamber with analytically known EF. Areas are in
// preprocessed 64x64 pixel units; the renderer works at 128x128 and the
// clips go through the standard preprocessing path.
struct PhantomSpec {
    double area_ed = 650.0;  // end-diastole chamber area, px^2
    double area_es = 300.0;  // end-systole chamber area, px^2
    int64_t cycle_frames = 32;
    double noise_sigma = 0.0;  // multiplicative speckle strength
    ViewGeometry view_geometry = ViewGeometry::four_chamber_like;
    int64_t rng_seed = 0;
};

void validate_spec(const PhantomSpec& spec);

// EF implied by the pseudo-volume V ~ A^{3/2}:
//   ef = 100 * (area_ed^{3/2} - area_es^{3/2}) / area_ed^{3/2}
double phantom_ef(const PhantomSpec& spec);

// End-systole area that yields the requested EF for a given ED area.
double area_es_for_ef(double area_ed, double ef_percent);

constexpr int64_t kPhantomRenderSize = 128;

// Renders one view as a raw video [cycle_frames, 1, 128, 128] in [0, 1].
// Frame 0 is end-diastole; frame cycle_frames/2 is end-systole.
torch::Tensor render_phantom_video(const PhantomSpec& spec);

// Chamber pixel area of frame t at render resolution, in 64x64 pixel units.
// Counts rendered pixels darker than the chamber/wall midpoint, the same
// rule a downstream segmenter would apply to a noiseless frame.
double measure_chamber_area(const torch::Tensor& frame, int64_t render_size = kPhantomRenderSize);

// Two correlated views of the same pulsation cycle: shared phase and EF,
// four-chamber-like geometry for A4C and two-chamber-like for A2C.
CaseRecord generate_phantom_case(const PhantomSpec& spec, const std::string& case_id = "phantom");

struct PhantomDatasetConfig {
    int64_t n_train = 0;
    int64_t n_val = 0;
    int64_t n_test = 0;
    double ef_lo = 20.0;
    double ef_hi = 75.0;
    int64_t seed = 0;
    double noise_sigma = 0.12;
    double area_ed_lo = 550.0;
    double area_ed_hi = 800.0;
};

// Draws EF uniformly from [ef_lo, ef_hi], writes clips and a manifest into
// out_dir. Deterministic given the seed.
DatasetManifest generate_phantom_dataset(const PhantomDatasetConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace echosynth
