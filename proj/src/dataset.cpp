#include "echosynth/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "echosynth/clip_io.hpp"
#include "echosynth/errors.hpp"

namespace echosynth {

torch::Tensor preprocess_frames(const torch::Tensor& raw, int64_t window_start) {
    if (!raw.defined() || raw.dim() != 4) {
        throw ShapeMismatch("raw video must be [N, C, H, W]");
    }
    const int64_t n = raw.size(0);
    if (n < kWindowFrames) {
        throw VideoTooShort("raw video has " + std::to_string(n) + " frames, need >= " +
                            std::to_string(kWindowFrames));
    }
    if (window_start < 0 || window_start + kWindowFrames > n) {
        throw OutOfBounds("window [" + std::to_string(window_start) + ", " +
                          std::to_string(window_start + kWindowFrames) + ") exceeds video of " + std::to_string(n) +
                          " frames");
    }
    auto window = raw.slice(0, window_start, window_start + kWindowFrames);
    auto kept = window.slice(0, 0, kWindowFrames, 2).to(torch::kFloat32);  // every second frame
    auto gray = kept.mean(/*dim=*/1, /*keepdim=*/true);
    namespace F = torch::nn::functional;
    auto resized = F::interpolate(gray, F::InterpolateFuncOptions()
                                            .size(std::vector<int64_t>{kClipSize, kClipSize})
                                            .mode(torch::kBilinear)
                                            .align_corners(false));
    return (resized * 2.0 - 1.0).clamp(-1.0, 1.0).contiguous();
}

EchoClip preprocess_clip(const torch::Tensor& raw, int64_t window_start, View view, const std::string& case_id,
                         double frame_rate) {
    EchoClip clip;
    clip.frames = preprocess_frames(raw, window_start);
    clip.view = view;
    clip.case_id = case_id;
    clip.frame_rate = frame_rate;
    validate_clip(clip);
    return clip;
}

std::vector<int64_t> enumerate_windows(int64_t raw_length, int64_t stride) {
    if (stride < 1) throw OutOfBounds("window stride must be >= 1");
    if (raw_length < kWindowFrames) {
        throw VideoTooShort("raw video has " + std::to_string(raw_length) + " frames, need >= " +
                            std::to_string(kWindowFrames));
    }
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + kWindowFrames <= raw_length; s += stride) starts.push_back(s);
    return starts;
}

int64_t DatasetManifest::count(Split s) const {
    return static_cast<int64_t>(std::count_if(records.begin(), records.end(),
                                              [&](const ManifestEntry& e) { return e.split == s; }));
}

std::vector<const ManifestEntry*> DatasetManifest::split_records(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : records) {
        if (e.split == s) out.push_back(&e);
    }
    return out;
}

void validate_splits(const DatasetManifest& manifest) {
    std::map<std::string, Split> seen;
    for (const auto& e : manifest.records) {
        auto [it, inserted] = seen.emplace(e.case_id, e.split);
        if (!inserted && it->second != e.split) {
            throw SplitOverlap("case '" + e.case_id + "' appears in both '" + to_string(it->second) + "' and '" +
                               to_string(e.split) + "'");
        }
    }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    validate_splits(manifest);
    nlohmann::json j;
    j["schema_version"] = manifest.schema_version;
    j["split_seed"] = manifest.split_seed;
    j["counts"] = {{"train", manifest.count(Split::train)},
                   {"val", manifest.count(Split::val)},
                   {"test", manifest.count(Split::test)}};
    auto& recs = j["records"] = nlohmann::json::array();
    for (const auto& e : manifest.records) {
        nlohmann::json r = {
            {"case_id", e.case_id},   {"ef_true", e.ef_true},
            {"split", to_string(e.split)},    {"provenance", to_string(e.provenance)},
            {"a4c", e.a4c_path},      {"variant", e.variant},
        };
        if (e.a2c_path) r["a2c"] = *e.a2c_path;
        recs.push_back(std::move(r));
    }
    std::ofstream os(path);
    if (!os) throw MissingArtifact("cannot open '" + path.string() + "' for writing");
    os << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest '" + path.string() + "': " + e.what());
    }
    DatasetManifest m;
    try {
        m.schema_version = j.at("schema_version").get<int>();
        if (m.schema_version != 1) {
            throw ParseError("unsupported manifest schema_version " + std::to_string(m.schema_version));
        }
        m.split_seed = j.at("split_seed").get<int64_t>();
        for (const auto& r : j.at("records")) {
            ManifestEntry e;
            e.case_id = r.at("case_id").get<std::string>();
            e.ef_true = r.at("ef_true").get<double>();
            e.split = split_from_string(r.at("split").get<std::string>());
            e.provenance = provenance_from_string(r.at("provenance").get<std::string>());
            e.a4c_path = r.at("a4c").get<std::string>();
            if (r.contains("a2c")) e.a2c_path = r.at("a2c").get<std::string>();
            e.variant = r.value("variant", std::string{});
            m.records.push_back(std::move(e));
        }
        if (j.contains("counts")) {
            const auto& c = j.at("counts");
            if (c.at("train").get<int64_t>() != m.count(Split::train) ||
                c.at("val").get<int64_t>() != m.count(Split::val) ||
                c.at("test").get<int64_t>() != m.count(Split::test)) {
                throw ParseError("manifest counts disagree with records in '" + path.string() + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest '" + path.string() + "': " + e.what());
    }
    validate_splits(m);
    return m;
}

CaseRecord load_case(const std::filesystem::path& base_dir, const ManifestEntry& entry) {
    CaseRecord rec;
    rec.a4c = read_clip(base_dir / entry.a4c_path);
    if (entry.a2c_path) rec.a2c = read_clip(base_dir / *entry.a2c_path);
    rec.ef_true = entry.ef_true;
    rec.split = entry.split;
    rec.provenance = entry.provenance;
    validate_case(rec);
    return rec;
}

std::vector<CaseRecord> load_split(const std::filesystem::path& manifest_path, const DatasetManifest& manifest,
                                   Split split) {
    const auto base_dir = manifest_path.parent_path();
    std::vector<CaseRecord> out;
    for (const auto* e : manifest.split_records(split)) out.push_back(load_case(base_dir, *e));
    return out;
}

std::vector<EchoClip> collect_clips(const std::vector<CaseRecord>& cases, ViewFilter filter) {
    std::vector<EchoClip> clips;
    for (const auto& c : cases) {
        if (filter != ViewFilter::a2c_only) clips.push_back(c.a4c);
        if (filter != ViewFilter::a4c_only && c.a2c) clips.push_back(*c.a2c);
    }
    return clips;
}

DatasetManifest import_raw_dataset(const std::vector<RawPair>& pairs, const std::filesystem::path& out_dir,
                                   int64_t window_stride) {
    std::filesystem::create_directories(out_dir / "clips");
    DatasetManifest manifest;
    for (const auto& p : pairs) {
        auto a4c_raw = read_tensor(p.a4c_video);
        const bool has_a2c = !p.a2c_video.empty();
        torch::Tensor a2c_raw;
        int64_t usable = a4c_raw.size(0);
        if (has_a2c) {
            a2c_raw = read_tensor(p.a2c_video);
            usable = std::min(usable, a2c_raw.size(0));
        }
        for (int64_t w : enumerate_windows(usable, window_stride)) {
            std::ostringstream variant;
            variant << "w" << w;
            ManifestEntry e;
            e.case_id = p.case_id;
            e.ef_true = p.ef_true;
            e.split = p.split;
            e.provenance = Provenance::real;
            e.variant = variant.str();

            const std::string stem = p.case_id + "_" + variant.str();
            auto a4c = preprocess_clip(a4c_raw, w, View::a4c, p.case_id, p.frame_rate);
            e.a4c_path = "clips/" + stem + "_a4c.ecl";
            write_clip(out_dir / e.a4c_path, a4c);
            if (has_a2c) {
                auto a2c = preprocess_clip(a2c_raw, w, View::a2c, p.case_id, p.frame_rate);
                e.a2c_path = "clips/" + stem + "_a2c.ecl";
                write_clip(out_dir / *e.a2c_path, a2c);
            }
            manifest.records.push_back(std::move(e));
        }
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

}  // namespace echosynth
