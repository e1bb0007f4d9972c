#include "testing.hpp"

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "echosynth/checkpoint.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/metrics.hpp"
#include "echosynth/rng.hpp"

using namespace echosynth;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("echosynth_metrics_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

FeatureExtractorConfig tiny_fx_config() {
    FeatureExtractorConfig cfg;
    cfg.feature_dim = 8;
    cfg.frames = 4;
    cfg.input_size = 16;
    return cfg;
}

EchoClip tiny_clip(uint64_t seed, double scale = 1.0, double shift = 0.0) {
    EchoClip clip;
    auto gen = make_generator(seed);
    clip.frames = ((torch::rand({4, 1, 16, 16}, gen) * 2 - 1) * scale + shift).clamp(-1.0, 1.0);
    clip.view = View::a2c;
    clip.case_id = "clip_" + std::to_string(seed);
    return clip;
}

GaussianSummary summary_1d(double mean, double var) {
    GaussianSummary g;
    g.mean = torch::tensor({mean}, torch::kFloat64);
    g.cov = torch::tensor({var}, torch::kFloat64).reshape({1, 1});
    return g;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("ssim of a tensor with itself is 1") {
    auto gen = make_generator(1);
    auto img = torch::rand({24, 24}, gen) * 2 - 1;
    CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));
    auto clip = torch::rand({3, 1, 16, 16}, gen) * 2 - 1;
    CHECK(ssim(clip, clip) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim is symmetric") {
    auto gen = make_generator(2);
    auto a = torch::rand({20, 20}, gen) * 2 - 1;
    auto b = torch::rand({20, 20}, gen) * 2 - 1;
    CHECK(ssim(a, b) == ssim(b, a));
    CHECK(ssim(a, b) < 1.0);
}

TEST_CASE("ssim of constant images matches the closed form") {
    // Constant planes have zero variance, so SSIM collapses to the luminance
    // term (2 p q + c1) / (p^2 + q^2 + c1) with c1 = (k1 * data_range)^2.
    auto check_pair = [](double p, double q) {
        auto a = torch::full({8, 8}, p);
        auto b = torch::full({8, 8}, q);
        const double c1 = (0.01 * 2.0) * (0.01 * 2.0);
        const double expected = (2.0 * p * q + c1) / (p * p + q * q + c1);
        CHECK(ssim(a, b) == doctest::Approx(expected).epsilon(1e-9));
    };
    check_pair(0.5, 0.5);    // identical -> 1
    check_pair(0.5, -0.25);  // opposite signs -> negative luminance score
    check_pair(0.0, 0.8);
    check_pair(-1.0, 1.0);
}

TEST_CASE("clip ssim is the mean of the per-frame scores") {
    auto gen = make_generator(3);
    auto a = torch::rand({4, 1, 12, 12}, gen) * 2 - 1;
    auto b = torch::rand({4, 1, 12, 12}, gen) * 2 - 1;
    double manual = 0.0;
    for (int64_t t = 0; t < 4; ++t) manual += ssim(a[t][0], b[t][0]);
    manual /= 4.0;
    CHECK(ssim(a, b) == doctest::Approx(manual).epsilon(1e-12));

    // [C, H, W] averages channel planes the same way.
    auto c = torch::rand({2, 10, 10}, gen);
    auto d = torch::rand({2, 10, 10}, gen);
    const double per_channel = 0.5 * (ssim(c[0], d[0]) + ssim(c[1], d[1]));
    CHECK(ssim(c, d) == doctest::Approx(per_channel).epsilon(1e-12));
}

TEST_CASE("ssim stays within [-1, 1] on random pairs") {
    auto gen = make_generator(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = torch::rand({10, 10}, gen) * 2 - 1;
        auto b = torch::rand({10, 10}, gen) * 2 - 1;
        const double s = ssim(a, b);
        CHECK(s <= 1.0 + 1e-12);
        CHECK(s >= -1.0 - 1e-12);
    }
}

TEST_CASE("ssim input validation") {
    auto a = torch::zeros({8, 8});
    CHECK_THROWS_AS(ssim(a, torch::zeros({8, 9})), ShapeMismatch);
    CHECK_THROWS_AS(ssim(torch::zeros({8}), torch::zeros({8})), ShapeMismatch);
    CHECK_THROWS_AS(ssim(torch::zeros({1, 1, 1, 8, 8}), torch::zeros({1, 1, 1, 8, 8})),
                    ShapeMismatch);
    CHECK_THROWS_AS(ssim(a, a, /*window=*/9), ShapeMismatch);  // window > image
    CHECK_THROWS_AS(ssim(a, a, /*window=*/0), ShapeMismatch);
}

TEST_CASE("fit_gaussian on {0, 2} gives mean 1 and variance 2 (n - 1 divisor)") {
    auto g = fit_gaussian(torch::tensor({0.0f, 2.0f}).reshape({2, 1}));
    CHECK(g.mean.item<double>() == 1.0);
    CHECK(g.cov.item<double>() == 2.0);
    CHECK((g.mean.scalar_type() == torch::kFloat64));
    CHECK((g.cov.scalar_type() == torch::kFloat64));
}

TEST_CASE("fit_gaussian on perfectly correlated 2-D points") {
    auto f = torch::tensor({0.0f, 0.0f, 1.0f, 1.0f, 2.0f, 2.0f}).reshape({3, 2});
    auto g = fit_gaussian(f);
    CHECK(torch::allclose(g.mean, torch::tensor({1.0, 1.0}, torch::kFloat64)));
    auto expected = torch::tensor({1.0, 1.0, 1.0, 1.0}, torch::kFloat64).reshape({2, 2});
    CHECK(torch::allclose(g.cov, expected, 1e-12, 1e-12));
}

TEST_CASE("fit_gaussian covariance is exactly symmetric") {
    auto gen = make_generator(5);
    auto g = fit_gaussian(torch::randn({10, 4}, gen));
    CHECK(torch::equal(g.cov, g.cov.t()));
}

TEST_CASE("fit_gaussian input validation") {
    CHECK_THROWS_AS(fit_gaussian(torch::zeros({1, 3})), TooFewSamples);
    CHECK_THROWS_AS(fit_gaussian(torch::zeros({0, 3})), TooFewSamples);
    CHECK_THROWS_AS(fit_gaussian(torch::zeros({5})), ShapeMismatch);
    CHECK_THROWS_AS(fit_gaussian(torch::zeros({2, 2, 2})), ShapeMismatch);
}

TEST_CASE("frechet distance between N(0,1) and N(1,1) is exactly 1") {
    CHECK(frechet_distance(summary_1d(0.0, 1.0), summary_1d(1.0, 1.0)) ==
          doctest::Approx(1.0).epsilon(1e-8));
    // Equal summaries -> 0.
    CHECK(frechet_distance(summary_1d(0.3, 0.7), summary_1d(0.3, 0.7)) ==
          doctest::Approx(0.0).epsilon(1e-10));
    CHECK(frechet_distance(summary_1d(0.3, 0.7), summary_1d(0.3, 0.7)) >= 0.0);
}

TEST_CASE("frechet distance matches the diagonal closed form") {
    // Commuting (diagonal) covariances: d = sum dmu^2 + sum (sqrt a - sqrt b)^2.
    auto gen = make_generator(6);
    for (int trial = 0; trial < 10; ++trial) {
        auto mu1 = torch::randn({4}, gen).to(torch::kFloat64);
        auto mu2 = torch::randn({4}, gen).to(torch::kFloat64);
        auto a = (torch::rand({4}, gen).to(torch::kFloat64) + 0.1);
        auto b = (torch::rand({4}, gen).to(torch::kFloat64) + 0.1);
        GaussianSummary g1{mu1, torch::diag(a)};
        GaussianSummary g2{mu2, torch::diag(b)};
        const double expected = (mu1 - mu2).pow(2).sum().item<double>() +
                                (a.sqrt() - b.sqrt()).pow(2).sum().item<double>();
        CHECK(frechet_distance(g1, g2) == doctest::Approx(expected).epsilon(1e-8));
    }
}

TEST_CASE("frechet distance is symmetric and rotation invariant") {
    auto gen = make_generator(7);
    auto make_psd = [&gen]() {
        auto m = torch::randn({3, 3}, gen).to(torch::kFloat64);
        return m.matmul(m.t()) + 0.1 * torch::eye(3, torch::kFloat64);
    };
    GaussianSummary g1{torch::randn({3}, gen).to(torch::kFloat64), make_psd()};
    GaussianSummary g2{torch::randn({3}, gen).to(torch::kFloat64), make_psd()};
    const double d12 = frechet_distance(g1, g2);
    const double d21 = frechet_distance(g2, g1);
    CHECK(d12 == doctest::Approx(d21).epsilon(1e-6));

    // Rotating both Gaussians by the same orthogonal matrix preserves the
    // distance: an independent functional check of the matrix square root.
    auto [q, r] = torch::linalg_qr(torch::randn({3, 3}, gen).to(torch::kFloat64));
    GaussianSummary g1r{q.matmul(g1.mean), q.matmul(g1.cov).matmul(q.t())};
    GaussianSummary g2r{q.matmul(g2.mean), q.matmul(g2.cov).matmul(q.t())};
    CHECK(frechet_distance(g1r, g2r) == doctest::Approx(d12).epsilon(1e-6));
}

TEST_CASE("frechet distance recovered from samples approaches the analytic value") {
    auto gen = make_generator(8);
    auto x = torch::randn({4000, 1}, gen);
    auto y = torch::randn({4000, 1}, gen) + 2.0;
    const double near = frechet_distance(fit_gaussian(x), summary_1d(0.0, 1.0));
    CHECK(near < 0.05);
    const double shifted = frechet_distance(fit_gaussian(x), fit_gaussian(y));
    CHECK(shifted == doctest::Approx(4.0).epsilon(0.1));
}

TEST_CASE("frechet distance error paths") {
    GaussianSummary bad{torch::zeros({2}, torch::kFloat64),
                        torch::diag(torch::tensor({-1.0, 1.0}, torch::kFloat64))};
    auto good = summary_1d(0.0, 1.0);
    GaussianSummary good2{torch::zeros({2}, torch::kFloat64), torch::eye(2, torch::kFloat64)};
    CHECK_THROWS_AS(frechet_distance(bad, good2), NotPSD);
    CHECK_THROWS_AS(frechet_distance(good, good2), DimensionMismatch);
}

TEST_CASE("clip encoder produces per-frame embeddings of the configured width") {
    auto cfg = tiny_fx_config();
    torch::manual_seed(9);
    ClipEncoder enc(cfg);
    auto gen = make_generator(10);
    auto x = torch::rand({2, 1, 4, 16, 16}, gen) * 2 - 1;
    auto emb = enc->forward(x);
    REQUIRE(emb.dim() == 3);
    CHECK(emb.size(0) == 2);
    CHECK(emb.size(1) == 4);   // one row per frame
    CHECK(emb.size(2) == 8);   // feature_dim
    CHECK_THROWS_AS(enc->forward(torch::zeros({1, 1, 5, 16, 16})), ShapeMismatch);

    FeatureExtractorConfig bad = cfg;
    bad.input_size = 12;  // not divisible by 8
    CHECK_THROWS_AS(ClipEncoder{bad}, InvalidConfig);
}

TEST_CASE("feature extractor config and mode strings round-trip") {
    auto cfg = tiny_fx_config();
    auto back = FeatureExtractorConfig::from_json(cfg.to_json());
    CHECK(back.feature_dim == 8);
    CHECK(back.frames == 4);
    CHECK(back.input_size == 16);
    CHECK((feature_mode_from_string("per_frame") == FeatureMode::per_frame));
    CHECK((feature_mode_from_string("per_clip") == FeatureMode::per_clip));
    CHECK_THROWS_AS(feature_mode_from_string("per_pixel"), ParseError);
    CHECK(std::string(ffd_label(FeatureMode::per_frame)) == "FFD-frame");
    CHECK(std::string(ffd_label(FeatureMode::per_clip)) == "FFD-clip");
}

TEST_CASE("train_feature_extractor is deterministic and freezes the encoder") {
    auto cfg = tiny_fx_config();
    std::vector<EchoClip> clips;
    for (uint64_t i = 0; i < 3; ++i) clips.push_back(tiny_clip(20 + i));

    auto fx1 = train_feature_extractor(clips, cfg, 30, /*iters=*/25, /*batch_size=*/2);
    auto fx2 = train_feature_extractor(clips, cfg, 30, /*iters=*/25, /*batch_size=*/2);
    auto p1 = fx1.encoder->named_parameters();
    auto p2 = fx2.encoder->named_parameters();
    for (const auto& item : p1) {
        CHECK(torch::equal(item.value(), p2[item.key()]));
        CHECK(!item.value().requires_grad());
    }
    CHECK(fx1.provenance.at("seed") == 30);
    CHECK(fx1.provenance.at("training_clips") == 3);
    CHECK(std::isfinite(fx1.provenance.at("final_loss").get<double>()));

    auto fx3 = train_feature_extractor(clips, cfg, 31, 25, 2);
    bool any_diff = false;
    auto p3 = fx3.encoder->named_parameters();
    for (const auto& item : p1)
        if (!torch::equal(item.value(), p3[item.key()])) any_diff = true;
    CHECK(any_diff);

    CHECK_THROWS_AS(train_feature_extractor({}, cfg, 30, 25, 2), DataEmpty);
}

TEST_CASE("extract_features: per_clip is the mean of the per_frame rows") {
    auto cfg = tiny_fx_config();
    std::vector<EchoClip> clips = {tiny_clip(40), tiny_clip(41)};
    auto fx = train_feature_extractor(clips, cfg, 42, 10, 2);
    auto clip = tiny_clip(43);
    auto per_frame = extract_features(fx, clip, FeatureMode::per_frame);
    REQUIRE(per_frame.sizes() == torch::IntArrayRef({4, 8}));
    auto per_clip = extract_features(fx, clip, FeatureMode::per_clip);
    REQUIRE(per_clip.sizes() == torch::IntArrayRef({1, 8}));
    CHECK(torch::allclose(per_clip, per_frame.mean(0, /*keepdim=*/true), 1e-6, 1e-7));
}

TEST_CASE("feature extractor round-trips through its checkpoint file") {
    auto dir = temp_dir("fx");
    auto cfg = tiny_fx_config();
    std::vector<EchoClip> clips = {tiny_clip(50), tiny_clip(51)};
    auto fx = train_feature_extractor(clips, cfg, 52, 15, 2);
    save_feature_extractor(fx, dir / "fx.esck");

    auto back = load_feature_extractor(dir / "fx.esck");
    CHECK(back.config.feature_dim == cfg.feature_dim);
    CHECK(back.provenance.at("seed") == 52);
    auto clip = tiny_clip(53);
    CHECK(torch::equal(extract_features(fx, clip, FeatureMode::per_frame),
                       extract_features(back, clip, FeatureMode::per_frame)));

    // A checkpoint of some other kind is rejected.
    CheckpointData other;
    other.meta = nlohmann::json{{"schema_version", 1}, {"kind", "trainer"}};
    other.add("x", torch::zeros({2}));
    write_checkpoint(dir / "other.esck", other);
    CHECK_THROWS_AS(load_feature_extractor(dir / "other.esck"), ParseError);
    CHECK_THROWS_AS(load_feature_extractor(dir / "absent.esck"), MissingArtifact);
    fs::remove_all(dir);
}

TEST_CASE("frechet feature distance separates unlike clip sets") {
    auto cfg = tiny_fx_config();
    // Dark noisy clips vs bright noisy clips; the extractor trains on both
    // so its features must spread the two populations apart.
    std::vector<EchoClip> dark, dark2, bright, all;
    for (uint64_t i = 0; i < 4; ++i) {
        dark.push_back(tiny_clip(60 + i, 0.2, -0.7));
        dark2.push_back(tiny_clip(70 + i, 0.2, -0.7));
        bright.push_back(tiny_clip(80 + i, 0.2, 0.7));
    }
    all = dark;
    all.insert(all.end(), bright.begin(), bright.end());
    auto fx = train_feature_extractor(all, cfg, 90, 40, 4);

    for (auto mode : {FeatureMode::per_frame, FeatureMode::per_clip}) {
        const double self = frechet_feature_distance(dark, dark, fx, mode);
        CHECK(self <= 1e-6);  // identical sets -> identical Gaussians
        const double within = frechet_feature_distance(dark, dark2, fx, mode);
        const double across = frechet_feature_distance(dark, bright, fx, mode);
        CHECK(across > within);
    }

    CHECK_THROWS_AS(frechet_feature_distance({}, dark, fx, FeatureMode::per_clip), DataEmpty);
    // One clip per side is too few rows for a per-clip Gaussian.
    std::vector<EchoClip> one = {tiny_clip(95)};
    CHECK_THROWS_AS(frechet_feature_distance(one, one, fx, FeatureMode::per_clip), TooFewSamples);
}

}  // TEST_SUITE
