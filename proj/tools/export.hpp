#pragma once

#include <filesystem>
#include <vector>

#include "echosynth/clip.hpp"

namespace echosynth::cli {

// 8-bit grayscale PNG contact sheet: one row per clip, one column per frame.
void write_grid_sheet(const std::filesystem::path& path, const std::vector<EchoClip>& clips);

// Per-clip animation, lossless FFV1 in a Matroska container. When no FFV1
// writer is available the clip is written as a PNG frame sequence next to
// `path` instead. Returns the path actually written (the video file or the
// first frame of the fallback sequence).
std::filesystem::path write_clip_animation(const std::filesystem::path& path, const EchoClip& clip,
                                           double default_fps = 8.0);

}  // namespace echosynth::cli
