#include "testing.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "echosynth/clip_io.hpp"
#include "echosynth/dataset.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

using namespace echosynth;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("echosynth_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

EchoClip make_clip(const std::string& case_id, View view, uint64_t seed) {
    EchoClip clip;
    auto gen = make_generator(seed);
    clip.frames = torch::rand({kClipFrames, kClipChannels, kClipSize, kClipSize}, gen) * 2 - 1;
    clip.view = view;
    clip.case_id = case_id;
    clip.frame_rate = 50.0;
    return clip;
}

ManifestEntry make_entry(const std::string& case_id, Split split, double ef = 55.0) {
    ManifestEntry e;
    e.case_id = case_id;
    e.ef_true = ef;
    e.split = split;
    e.provenance = Provenance::phantom;
    e.a4c_path = "clips/" + case_id + "_a4c.ecl";
    return e;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("preprocess keeps every second frame of a 32-frame window") {
    // Frame i of the raw video is the constant value i / 40; bilinear resize
    // of a constant image is that constant, so the source index of every
    // output frame is recoverable exactly.
    const int64_t n = 40;
    auto raw = torch::zeros({n, 3, 50, 70});
    for (int64_t i = 0; i < n; ++i) raw[i] = static_cast<double>(i) / n;

    auto out = preprocess_frames(raw, 0);
    REQUIRE(out.sizes() == torch::IntArrayRef({kClipFrames, kClipChannels, kClipSize, kClipSize}));
    for (int64_t k = 0; k < kClipFrames; ++k) {
        const double src = static_cast<double>(2 * k) / n;  // kept source frame 2k
        CHECK(out[k].mean().item<double>() == doctest::Approx(2 * src - 1).epsilon(1e-5));
    }

    auto shifted = preprocess_frames(raw, 8);
    for (int64_t k = 0; k < kClipFrames; ++k) {
        const double src = static_cast<double>(8 + 2 * k) / n;
        CHECK(shifted[k].mean().item<double>() == doctest::Approx(2 * src - 1).epsilon(1e-5));
    }
}

TEST_CASE("preprocess output shape, dtype and range") {
    auto raw = torch::rand({45, 2, 31, 47}, make_generator(31));
    auto out = preprocess_frames(raw, 5);
    CHECK(out.sizes() == torch::IntArrayRef({16, 1, 64, 64}));
    CHECK((out.scalar_type() == torch::kFloat32));
    CHECK(out.min().item<double>() >= -1.0);
    CHECK(out.max().item<double>() <= 1.0);
    // Determinism: pure function of its inputs.
    CHECK(torch::equal(out, preprocess_frames(raw, 5)));
}

TEST_CASE("preprocess [0,1] -> [-1,1] mapping is invertible for 8-bit data") {
    // 64x64 input disables resampling, leaving only the affine map; 8-bit
    // levels k/255 must round-trip through (v+1)/2*255 to the exact level.
    auto levels = torch::arange(0, 256, torch::kFloat32) / 255.0;
    auto raw = levels.reshape({1, 1, 16, 16}).repeat({kWindowFrames, 1, 4, 4});
    auto out = preprocess_frames(raw.slice(2, 0, 64).slice(3, 0, 64), 0);
    auto back = ((out + 1.0) / 2.0 * 255.0).round().clamp(0, 255);
    auto want = (raw.slice(2, 0, 64).slice(3, 0, 64).slice(0, 0, kWindowFrames, 2).mean(1, true) * 255.0).round();
    CHECK(torch::equal(back, want));
}

TEST_CASE("preprocess rejects short videos and bad windows") {
    CHECK_THROWS_AS(preprocess_frames(torch::rand({31, 1, 64, 64}), 0), VideoTooShort);
    auto raw = torch::rand({40, 1, 64, 64});
    CHECK_THROWS_AS(preprocess_frames(raw, 9), OutOfBounds);   // 9 + 32 > 40
    CHECK_THROWS_AS(preprocess_frames(raw, -1), OutOfBounds);
    CHECK_THROWS_AS(preprocess_frames(torch::rand({40, 64, 64}), 0), ShapeMismatch);
}

TEST_CASE("enumerate_windows matches the worked examples") {
    CHECK(enumerate_windows(32, 16) == std::vector<int64_t>{0});
    CHECK(enumerate_windows(64, 16) == std::vector<int64_t>{0, 16, 32});
    CHECK(enumerate_windows(45, 16) == std::vector<int64_t>{0});
    CHECK(enumerate_windows(47, 15) == std::vector<int64_t>{0, 15});
    CHECK_THROWS_AS(enumerate_windows(31, 16), VideoTooShort);
    CHECK_THROWS_AS(enumerate_windows(64, 0), OutOfBounds);
}

TEST_CASE("manifest save/load round-trips every field") {
    auto dir = temp_dir("manifest_rt");
    DatasetManifest m;
    m.split_seed = 123;
    auto e0 = make_entry("case_000", Split::train, 48.5);
    e0.a2c_path = "clips/case_000_a2c.ecl";
    e0.variant = "w16";
    e0.provenance = Provenance::real;
    m.records.push_back(e0);
    m.records.push_back(make_entry("case_001", Split::val, 62.0));
    m.records.push_back(make_entry("case_002", Split::test, 30.0));

    auto path = dir / "manifest.json";
    save_manifest(m, path);
    auto back = load_manifest(path);

    CHECK(back.schema_version == 1);
    CHECK(back.split_seed == 123);
    REQUIRE(back.records.size() == 3);
    CHECK(back.records[0].case_id == "case_000");
    CHECK(back.records[0].ef_true == 48.5);
    CHECK(back.records[0].split == Split::train);
    CHECK(back.records[0].provenance == Provenance::real);
    CHECK(back.records[0].a4c_path == "clips/case_000_a4c.ecl");
    REQUIRE(back.records[0].a2c_path.has_value());
    CHECK(*back.records[0].a2c_path == "clips/case_000_a2c.ecl");
    CHECK(back.records[0].variant == "w16");
    CHECK_FALSE(back.records[1].a2c_path.has_value());
    CHECK(back.records[1].provenance == Provenance::phantom);
    CHECK(back.count(Split::train) == 1);
    CHECK(back.count(Split::val) == 1);
    CHECK(back.count(Split::test) == 1);
}

TEST_CASE("a split overlap is rejected at save and load") {
    DatasetManifest m;
    m.records.push_back(make_entry("case_dup", Split::train));
    m.records.push_back(make_entry("case_dup", Split::val));
    auto dir = temp_dir("manifest_overlap");
    CHECK_THROWS_AS(validate_splits(m), SplitOverlap);
    CHECK_THROWS_AS(save_manifest(m, dir / "manifest.json"), SplitOverlap);
    // Same case twice within one split is fine (windows, synthetic variants).
    DatasetManifest ok;
    ok.records.push_back(make_entry("case_dup", Split::train));
    ok.records.push_back(make_entry("case_dup", Split::train));
    CHECK_NOTHROW(validate_splits(ok));
}

TEST_CASE("tampered counts and malformed JSON are rejected") {
    auto dir = temp_dir("manifest_tamper");
    DatasetManifest m;
    m.records.push_back(make_entry("case_000", Split::train));
    auto path = dir / "manifest.json";
    save_manifest(m, path);

    nlohmann::json j;
    {
        std::ifstream is(path);
        is >> j;
    }
    j["counts"]["train"] = 7;
    {
        std::ofstream os(path);
        os << j.dump(2);
    }
    CHECK_THROWS_AS(load_manifest(path), ParseError);

    auto garbled = dir / "garbled.json";
    std::ofstream(garbled) << "{ not json";
    CHECK_THROWS_AS(load_manifest(garbled), ParseError);
    CHECK_THROWS_AS(load_manifest(dir / "nope.json"), MissingArtifact);
}

TEST_CASE("a 450-train / 50-test manifest keeps shape through a round trip") {
    auto dir = temp_dir("manifest_450");
    DatasetManifest m;
    m.split_seed = 7;
    for (int i = 0; i < 450; ++i) {
        auto e = make_entry("train_" + std::to_string(i), Split::train, 20.0 + (i % 55));
        e.a2c_path = "clips/train_" + std::to_string(i) + "_a2c.ecl";
        m.records.push_back(e);
    }
    for (int i = 0; i < 50; ++i) {
        auto e = make_entry("test_" + std::to_string(i), Split::test, 25.0 + (i % 50));
        e.a2c_path = "clips/test_" + std::to_string(i) + "_a2c.ecl";
        m.records.push_back(e);
    }
    auto path = dir / "manifest.json";
    save_manifest(m, path);
    auto back = load_manifest(path);
    CHECK(back.count(Split::train) == 450);
    CHECK(back.count(Split::val) == 0);
    CHECK(back.count(Split::test) == 50);
    CHECK(back.records.size() == 500);
}

TEST_CASE("load_case reads paired and single-view records") {
    auto dir = temp_dir("load_case");
    fs::create_directories(dir / "clips");
    auto a4c = make_clip("case_p", View::a4c, 41);
    auto a2c = make_clip("case_p", View::a2c, 42);
    write_clip(dir / "clips/case_p_a4c.ecl", a4c);
    write_clip(dir / "clips/case_p_a2c.ecl", a2c);

    auto e = make_entry("case_p", Split::train, 61.0);
    e.a2c_path = "clips/case_p_a2c.ecl";
    e.a4c_path = "clips/case_p_a4c.ecl";
    auto rec = load_case(dir, e);
    CHECK(torch::equal(rec.a4c.frames, a4c.frames));
    REQUIRE(rec.a2c.has_value());
    CHECK(torch::equal(rec.a2c->frames, a2c.frames));
    CHECK(rec.ef_true == 61.0);

    e.a2c_path.reset();
    auto solo = load_case(dir, e);
    CHECK_FALSE(solo.a2c.has_value());

    e.a4c_path = "clips/absent.ecl";
    CHECK_THROWS_AS(load_case(dir, e), MissingArtifact);
}

TEST_CASE("collect_clips respects the view filter") {
    std::vector<CaseRecord> cases(2);
    cases[0].a4c = make_clip("c0", View::a4c, 51);
    cases[0].a2c = make_clip("c0", View::a2c, 52);
    cases[0].ef_true = 50.0;
    cases[1].a4c = make_clip("c1", View::a4c, 53);
    cases[1].ef_true = 50.0;

    CHECK(collect_clips(cases, ViewFilter::a4c_only).size() == 2);
    CHECK(collect_clips(cases, ViewFilter::a2c_only).size() == 1);
    CHECK(collect_clips(cases, ViewFilter::both).size() == 3);
    for (const auto& c : collect_clips(cases, ViewFilter::a2c_only)) CHECK(c.view == View::a2c);
}

TEST_CASE("import_raw_dataset windows raw videos and writes a loadable manifest") {
    auto dir = temp_dir("import_raw");
    auto raw_dir = dir / "raw";
    fs::create_directories(raw_dir);

    auto gen = make_generator(61);
    // 64-frame paired case -> 3 windows; 45-frame single-view case -> 1.
    write_tensor(raw_dir / "p0_a4c.ecl", torch::rand({64, 1, 80, 80}, gen));
    write_tensor(raw_dir / "p0_a2c.ecl", torch::rand({64, 1, 80, 80}, gen));
    write_tensor(raw_dir / "p1_a4c.ecl", torch::rand({45, 1, 80, 80}, gen));

    std::vector<RawPair> pairs(2);
    pairs[0].case_id = "p0";
    pairs[0].a4c_video = raw_dir / "p0_a4c.ecl";
    pairs[0].a2c_video = raw_dir / "p0_a2c.ecl";
    pairs[0].ef_true = 58.0;
    pairs[0].split = Split::train;
    pairs[1].case_id = "p1";
    pairs[1].a4c_video = raw_dir / "p1_a4c.ecl";
    pairs[1].ef_true = 33.0;
    pairs[1].split = Split::test;

    auto out_dir = dir / "dataset";
    auto manifest = import_raw_dataset(pairs, out_dir);
    REQUIRE(manifest.records.size() == 4);
    CHECK(manifest.records[0].variant == "w0");
    CHECK(manifest.records[1].variant == "w16");
    CHECK(manifest.records[2].variant == "w32");
    CHECK(manifest.records[3].variant == "w0");
    CHECK(manifest.records[0].a2c_path.has_value());
    CHECK_FALSE(manifest.records[3].a2c_path.has_value());

    auto loaded = load_manifest(out_dir / "manifest.json");
    auto train = load_split(out_dir / "manifest.json", loaded, Split::train);
    REQUIRE(train.size() == 3);
    for (const auto& rec : train) CHECK_NOTHROW(validate_case(rec));
    auto test = load_split(out_dir / "manifest.json", loaded, Split::test);
    REQUIRE(test.size() == 1);
    CHECK(test[0].ef_true == 33.0);
}

}  // TEST_SUITE
