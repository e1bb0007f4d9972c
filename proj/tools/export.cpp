#include "export.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/videoio.hpp>

#include <cstdio>

#include "echosynth/errors.hpp"

namespace echosynth::cli {

namespace fs = std::filesystem;

namespace {

// [-1, 1] float frame [C, H, W] -> 8-bit grayscale Mat.
cv::Mat frame_to_u8(const torch::Tensor& frame) {
    auto u8 = ((frame.squeeze(0) + 1.0) * 0.5 * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
    cv::Mat mat(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1);
    std::memcpy(mat.data, u8.data_ptr<uint8_t>(), static_cast<size_t>(u8.numel()));
    return mat;
}

}  // namespace

void write_grid_sheet(const fs::path& path, const std::vector<EchoClip>& clips) {
    if (clips.empty()) throw DataEmpty("no clips to lay out in a grid sheet");
    const int64_t T = clips.front().frames.size(0);
    const int64_t H = clips.front().frames.size(2);
    const int64_t W = clips.front().frames.size(3);
    cv::Mat sheet(static_cast<int>(clips.size() * H), static_cast<int>(T * W), CV_8UC1,
                  cv::Scalar(0));
    for (size_t row = 0; row < clips.size(); ++row) {
        const auto& frames = clips[row].frames;
        if (frames.size(0) != T || frames.size(2) != H || frames.size(3) != W)
            throw ShapeMismatch("grid sheet clips must share one geometry");
        for (int64_t t = 0; t < T; ++t) {
            cv::Rect cell(static_cast<int>(t * W), static_cast<int>(row * H), static_cast<int>(W),
                          static_cast<int>(H));
            frame_to_u8(frames[t]).copyTo(sheet(cell));
        }
    }
    if (!cv::imwrite(path.string(), sheet))
        throw MissingArtifact("could not write grid sheet " + path.string());
}

fs::path write_clip_animation(const fs::path& path, const EchoClip& clip, double default_fps) {
    const double fps = clip.frame_rate > 0.0 ? clip.frame_rate : default_fps;
    const int H = static_cast<int>(clip.frames.size(2));
    const int W = static_cast<int>(clip.frames.size(3));
    cv::VideoWriter writer(path.string(), cv::VideoWriter::fourcc('F', 'F', 'V', '1'), fps,
                           {W, H}, /*isColor=*/false);
    if (writer.isOpened()) {
        for (int64_t t = 0; t < clip.frames.size(0); ++t) writer.write(frame_to_u8(clip.frames[t]));
        writer.release();
        return path;
    }
    // No lossless codec available: fall back to a PNG frame sequence.
    fs::path first;
    for (int64_t t = 0; t < clip.frames.size(0); ++t) {
        char suffix[32];
        std::snprintf(suffix, sizeof(suffix), "_f%02lld.png", static_cast<long long>(t));
        fs::path frame_path = path.parent_path() / (path.stem().string() + suffix);
        if (t == 0) first = frame_path;
        if (!cv::imwrite(frame_path.string(), frame_to_u8(clip.frames[t])))
            throw MissingArtifact("could not write animation frame " + frame_path.string());
    }
    return first;
}

}  // namespace echosynth::cli
