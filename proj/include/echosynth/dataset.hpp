#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "echosynth/clip.hpp"

namespace echosynth {

// Takes raw frames [window_start, window_start + 32), keeps every second
// frame, averages channels to grayscale, resizes spatially to 64x64 with
// bilinear interpolation and maps pixel values [0, 1] -> [-1, 1].
// raw is [N, C, H0, W0] float with values in [0, 1].
torch::Tensor preprocess_frames(const torch::Tensor& raw, int64_t window_start);

EchoClip preprocess_clip(const torch::Tensor& raw, int64_t window_start, View view,
                         const std::string& case_id, double frame_rate = 0.0);

// All window starts s with s + 32 <= raw_length, ascending, spaced by stride.
std::vector<int64_t> enumerate_windows(int64_t raw_length, int64_t stride);

constexpr int64_t kDefaultWindowStride = 16;

// One row of a dataset manifest. Paths are relative to the manifest file.
// `variant` disambiguates multiple records for the same case (synthetic
// candidates); empty for plain real/phantom records.
struct ManifestEntry {
    std::string case_id;
    double ef_true = 0.0;
    Split split = Split::train;
    Provenance provenance = Provenance::real;
    std::string a4c_path;
    std::optional<std::string> a2c_path;
    std::string variant;
};

struct DatasetManifest {
    int schema_version = 1;
    int64_t split_seed = 0;
    std::vector<ManifestEntry> records;

    int64_t count(Split s) const;
    std::vector<const ManifestEntry*> split_records(Split s) const;
};

// Throws SplitOverlap when a case_id appears in more than one split.
void validate_splits(const DatasetManifest& manifest);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Loads the clips referenced by an entry; paths resolve against base_dir
// (normally the manifest's directory).
CaseRecord load_case(const std::filesystem::path& base_dir, const ManifestEntry& entry);

std::vector<CaseRecord> load_split(const std::filesystem::path& manifest_path, const DatasetManifest& manifest,
                                   Split split);

enum class ViewFilter { a4c_only, a2c_only, both };

// Flattens case records into per-clip EF training samples.
std::vector<EchoClip> collect_clips(const std::vector<CaseRecord>& cases, ViewFilter filter);

// Loader for externally supplied paired data: reads raw videos (clip
// containers of arbitrary [N, C, H0, W0] shape in [0, 1]), windows and
// preprocesses them, writes standard clips and a manifest into out_dir.
// One record is emitted per (case, window) with window index in `variant`.
struct RawPair {
    std::string case_id;
    std::filesystem::path a4c_video;
    std::filesystem::path a2c_video;  // may be empty for single-view studies
    double ef_true = 0.0;
    Split split = Split::train;
    double frame_rate = 0.0;
};

DatasetManifest import_raw_dataset(const std::vector<RawPair>& pairs, const std::filesystem::path& out_dir,
                                   int64_t window_stride = kDefaultWindowStride);

}  // namespace echosynth
