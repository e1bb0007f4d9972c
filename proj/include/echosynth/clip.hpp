#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>

#include "echosynth/errors.hpp"

namespace echosynth {

// Fixed post-preprocessing clip geometry. Every tensor that flows through the
// generative pipeline has this shape.
constexpr int64_t kClipFrames = 16;
constexpr int64_t kClipChannels = 1;
constexpr int64_t kClipSize = 64;
constexpr int64_t kWindowFrames = 32;  // raw frames consumed per clip

enum class View { a2c, a4c };
enum class Split { train, val, test };
enum class Provenance { real, phantom, synthetic };

const char* to_string(View v);
const char* to_string(Split s);
const char* to_string(Provenance p);
View view_from_string(const std::string& s);
Split split_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);

// A preprocessed, fixed-shape echo video clip. frames is [T, C, H, W]
// float32 with every value in [-1, 1].
struct EchoClip {
    torch::Tensor frames;
    View view = View::a4c;
    std::string case_id;
    double frame_rate = 0.0;  // metadata only
};

// Throws ShapeMismatch when the tensor is not [16, 1, 64, 64] float32 or
// holds values outside [-1, 1].
void validate_clip(const EchoClip& clip);

// Clip tensor [T, C, H, W] -> network layout [1, C, T, H, W].
torch::Tensor clip_to_input(const torch::Tensor& frames);
// Network layout [1, C, T, H, W] -> clip tensor [T, C, H, W].
torch::Tensor input_to_clip(const torch::Tensor& x);

// A paired study. a2c is absent for single-view studies.
struct CaseRecord {
    EchoClip a4c;
    std::optional<EchoClip> a2c;
    double ef_true = 0.0;  // percent, in (0, 100)
    Split split = Split::train;
    Provenance provenance = Provenance::real;
};

void validate_case(const CaseRecord& rec);

}  // namespace echosynth
