#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include "echosynth/clip.hpp"

namespace echosynth {

// On-disk clip container (".ecl"): a fixed-order shape header followed by the
// raw little-endian float32 payload. Bit-exact round trip, no codec loss.
//
//   bytes 0..3   magic "ECLP"
//   bytes 4..7   u32 format version (currently 1)
//   bytes 8..11  u32 ndim
//   then         ndim x u32 dims, outermost first
//   then         prod(dims) x f32 payload, C-contiguous
//
// Clip metadata (case_id, view, frame_rate) lives in a JSON sidecar at
// "<path>.json". Raw videos (arbitrary [N, C, H, W]) use the same container
// without a sidecar.

void write_tensor(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_tensor(const std::filesystem::path& path);

void write_clip(const std::filesystem::path& path, const EchoClip& clip);
EchoClip read_clip(const std::filesystem::path& path);

}  // namespace echosynth
