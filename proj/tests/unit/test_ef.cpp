#include "testing.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "echosynth/checkpoint.hpp"
#include "echosynth/ef.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

using namespace echosynth;
namespace fs = std::filesystem;

namespace {

// Canonical pipeline geometry — required wherever predict_ef / evaluate_ef
// run, because they validate clips against the standard 16x1x64x64 shape.
EFBackboneConfig canonical_backbone() { return EFBackboneConfig{}; }

// Reduced geometry for training-loop tests: train_ef consumes raw EFSample
// tensors and only has to match the model config, so smaller clips keep the
// loop fast without changing any code path.
EFBackboneConfig tiny_backbone() {
    EFBackboneConfig cfg;
    cfg.frames = 4;
    cfg.input_size = 32;
    return cfg;
}

EchoClip clip_for(const EFBackboneConfig& cfg, uint64_t seed, View view = View::a4c) {
    EchoClip clip;
    auto gen = make_generator(seed);
    clip.frames = torch::rand({cfg.frames, cfg.in_channels, cfg.input_size, cfg.input_size}, gen) * 2 - 1;
    clip.view = view;
    clip.case_id = "case_" + std::to_string(seed);
    return clip;
}

EFSample sample_for(const EFBackboneConfig& cfg, uint64_t seed, double ef) {
    EFSample s;
    s.frames = clip_for(cfg, seed).frames;
    s.ef_true = ef;
    s.case_id = "case_" + std::to_string(seed);
    return s;
}

// Pins the model output far outside the valid EF range so report clamping
// is actually exercised rather than trivially satisfied.
void pin_head_bias(EFRegressor& model, double value) {
    torch::NoGradGuard guard;
    auto params = model->named_parameters();
    params["head.bias"].fill_(value);
    params["head.weight"].zero_();
}

}  // namespace

TEST_SUITE("ef") {

TEST_CASE("compute_metrics on the worked example: preds {50,60} vs targets {55,65}") {
    auto rep = compute_metrics({50.0, 60.0}, {55.0, 65.0});
    CHECK(rep.mae == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(rep.rmse == doctest::Approx(5.0).epsilon(1e-12));
    // SS_res = 25 + 25 = 50, SS_tot = 25 + 25 = 50 -> R^2 = 0.
    CHECK(rep.r2 == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("compute_metrics: perfect predictions give R^2 = 1 and zero errors") {
    auto rep = compute_metrics({20.0, 45.0, 71.0}, {20.0, 45.0, 71.0});
    CHECK(rep.r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.mae == 0.0);
    CHECK(rep.rmse == 0.0);
}

TEST_CASE("compute_metrics: predicting the target mean gives R^2 = 0") {
    std::vector<double> targets = {30.0, 50.0, 70.0};
    std::vector<double> preds(3, 50.0);  // the mean
    auto rep = compute_metrics(preds, targets);
    CHECK(rep.r2 == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rep.mae == doctest::Approx(40.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("compute_metrics against hand-computed 5-element vectors") {
    std::vector<double> preds = {42.0, 55.5, 38.0, 61.0, 50.0};
    std::vector<double> targets = {40.0, 60.0, 35.0, 58.0, 52.0};
    // errors: 2, -4.5, 3, 3, -2
    const double mae = (2.0 + 4.5 + 3.0 + 3.0 + 2.0) / 5.0;
    const double mse = (4.0 + 20.25 + 9.0 + 9.0 + 4.0) / 5.0;
    const double mean_t = (40.0 + 60.0 + 35.0 + 58.0 + 52.0) / 5.0;
    double ss_tot = 0.0;
    for (double t : targets) ss_tot += (t - mean_t) * (t - mean_t);
    const double ss_res = 4.0 + 20.25 + 9.0 + 9.0 + 4.0;
    auto rep = compute_metrics(preds, targets);
    CHECK(rep.mae == doctest::Approx(mae).epsilon(1e-12));
    CHECK(rep.rmse == doctest::Approx(std::sqrt(mse)).epsilon(1e-12));
    CHECK(rep.r2 == doctest::Approx(1.0 - ss_res / ss_tot).epsilon(1e-12));
}

TEST_CASE("compute_metrics input validation") {
    CHECK_THROWS_AS(compute_metrics({1.0, 2.0}, {1.0}), LengthMismatch);
    CHECK_THROWS_AS(compute_metrics({1.0}, {1.0}), LengthMismatch);
    CHECK_THROWS_AS(compute_metrics({}, {}), LengthMismatch);
    CHECK_THROWS_AS(compute_metrics({50.0, 51.0}, {60.0, 60.0}), DegenerateTargets);
}

TEST_CASE("rmse is never below mae (random vectors)") {
    auto gen = make_generator(1);
    for (int trial = 0; trial < 200; ++trial) {
        auto p = torch::rand({16}, gen) * 100;
        auto t = torch::rand({16}, gen) * 80 + 10;
        std::vector<double> preds, targets;
        for (int64_t i = 0; i < 16; ++i) {
            preds.push_back(p[i].item<double>());
            targets.push_back(t[i].item<double>());
        }
        auto rep = compute_metrics(preds, targets);
        CHECK(rep.rmse >= rep.mae);
    }
}

TEST_CASE("backbone slots other than small3dcnn are rejected") {
    EFBackboneConfig cfg;
    cfg.backbone = EFBackbone::resnet2plus1d_like;
    CHECK_THROWS_AS(build_ef_model(cfg, 0), InvalidConfig);
    cfg.backbone = EFBackbone::transformer_like;
    CHECK_THROWS_AS(build_ef_model(cfg, 0), InvalidConfig);
    CHECK((ef_backbone_from_string("small3dcnn") == EFBackbone::small3dcnn));
    CHECK((ef_backbone_from_string("resnet2plus1d_like") == EFBackbone::resnet2plus1d_like));
    CHECK_THROWS_AS(ef_backbone_from_string("vit"), ParseError);
    CHECK((ef_mode_from_string("biplane") == EFMode::biplane));
    CHECK(std::string(to_string(EFMode::single_plane)) == "single_plane");
    CHECK_THROWS_AS(ef_mode_from_string("triplane"), ParseError);
}

TEST_CASE("config JSON round-trips") {
    auto cfg = tiny_backbone();
    auto back = EFBackboneConfig::from_json(cfg.to_json());
    CHECK((back.backbone == cfg.backbone));
    CHECK(back.frames == cfg.frames);
    CHECK(back.in_channels == cfg.in_channels);
    CHECK(back.input_size == cfg.input_size);

    EFTrainConfig tcfg;
    tcfg.batch_size = 12;
    tcfg.epochs = 33;
    tcfg.lr = 2.5e-4;
    tcfg.seed = 99;
    auto tback = EFTrainConfig::from_json(tcfg.to_json());
    CHECK(tback.batch_size == 12);
    CHECK(tback.epochs == 33);
    CHECK(tback.lr == 2.5e-4);
    CHECK(tback.seed == 99);
}

TEST_CASE("the canonical backbone lands near 200k parameters") {
    auto model = build_ef_model(canonical_backbone(), 1);
    int64_t n = 0;
    for (const auto& p : model->parameters()) n += p.numel();
    CHECK(n > 150'000);
    CHECK(n < 260'000);
}

TEST_CASE("same seed builds identical EF models; prediction is deterministic") {
    auto cfg = canonical_backbone();
    auto a = build_ef_model(cfg, 7);
    auto b = build_ef_model(cfg, 7);
    auto pa = a->named_parameters();
    auto pb = b->named_parameters();
    for (const auto& item : pa) CHECK(torch::equal(item.value(), pb[item.key()]));
    auto clip = clip_for(cfg, 3);
    CHECK(predict_ef(a, clip) == predict_ef(b, clip));
    CHECK(std::isfinite(predict_ef(a, clip)));
}

TEST_CASE("predict_ef maps the centered model output back to percent") {
    auto cfg = canonical_backbone();
    auto model = build_ef_model(cfg, 8);
    auto clip = clip_for(cfg, 9);
    double raw;
    {
        torch::NoGradGuard ng;
        model->eval();
        raw = model->forward(clip_to_input(clip.frames)).item<double>();
    }
    CHECK(predict_ef(model, clip) == doctest::Approx(kEfOffset + kEfScale * raw).epsilon(1e-9));
}

TEST_CASE("predict_ef rejects clips that are not canonical pipeline clips") {
    auto model = build_ef_model(canonical_backbone(), 8);
    auto off_shape = clip_for(tiny_backbone(), 9);
    CHECK_THROWS_AS(predict_ef(model, off_shape), ShapeMismatch);
}

TEST_CASE("biplane prediction is the mean of the two views") {
    auto cfg = canonical_backbone();
    auto model = build_ef_model(cfg, 10);
    auto a4c = clip_for(cfg, 11, View::a4c);
    auto a2c = clip_for(cfg, 12, View::a2c);
    const double p4 = predict_ef(model, a4c);
    const double p2 = predict_ef(model, a2c);
    CHECK(predict_biplane(model, a4c, a2c) == doctest::Approx(0.5 * (p4 + p2)).epsilon(1e-12));
    // Identical inputs: the biplane average collapses to the single-view value.
    CHECK(predict_biplane(model, a4c, a4c) == doctest::Approx(p4).epsilon(1e-12));
}

TEST_CASE("ef_samples_from_cases applies the view filter and keeps EF labels") {
    auto cfg = tiny_backbone();
    std::vector<CaseRecord> cases(2);
    cases[0].a4c = clip_for(cfg, 13, View::a4c);
    cases[0].a2c = clip_for(cfg, 14, View::a2c);
    cases[0].ef_true = 61.0;
    cases[1].a4c = clip_for(cfg, 15, View::a4c);
    cases[1].ef_true = 39.0;

    auto both = ef_samples_from_cases(cases, ViewFilter::both);
    CHECK(both.size() == 3);
    auto a4c_only = ef_samples_from_cases(cases, ViewFilter::a4c_only);
    REQUIRE(a4c_only.size() == 2);
    CHECK(a4c_only[0].ef_true == 61.0);
    CHECK(a4c_only[1].ef_true == 39.0);
    CHECK(torch::equal(a4c_only[0].frames, cases[0].a4c.frames));
    auto a2c_only = ef_samples_from_cases(cases, ViewFilter::a2c_only);
    REQUIRE(a2c_only.size() == 1);
    CHECK(torch::equal(a2c_only[0].frames, cases[0].a2c->frames));
}

TEST_CASE("enumerate_grid covers the full 27-point cartesian product in order") {
    EFGrid grid;
    auto configs = enumerate_grid(grid, 5);
    REQUIRE(configs.size() == 27);
    // (batch, epochs, lr) nesting: lr varies fastest.
    CHECK(configs[0].batch_size == 8);
    CHECK(configs[0].epochs == 50);
    CHECK(configs[0].lr == 1e-3);
    CHECK(configs[1].lr == 5e-4);
    CHECK(configs[2].lr == 1e-4);
    CHECK(configs[3].epochs == 100);
    CHECK(configs[9].batch_size == 16);
    CHECK(configs[26].batch_size == 24);
    CHECK(configs[26].epochs == 150);
    CHECK(configs[26].lr == 1e-4);
    for (const auto& c : configs) CHECK(c.seed == 5);

    EFGrid small;
    small.batch_sizes = {4};
    small.epochs = {10, 20};
    small.lrs = {1e-3};
    CHECK(enumerate_grid(small, 0).size() == 2);
}

TEST_CASE("train_ef fits a constant-EF dataset and reports percent^2 MSE") {
    auto cfg = tiny_backbone();
    auto model = build_ef_model(cfg, 20);
    // Four distinct clips, all labelled EF 60: the model only has to learn
    // a constant, which must drive validation MSE below 1 percent^2.
    std::vector<EFSample> train, val;
    for (uint64_t i = 0; i < 4; ++i) train.push_back(sample_for(cfg, 30 + i, 60.0));
    val.push_back(sample_for(cfg, 40, 60.0));
    EFTrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.epochs = 80;
    tcfg.lr = 1e-2;
    tcfg.seed = 21;
    auto result = train_ef(model, train, val, tcfg);
    REQUIRE(result.val_curve.size() == 80);
    CHECK(result.best_epoch >= 0);
    CHECK(result.best_epoch < 80);
    CHECK(result.best_val_mse < 1.0);
    // The model ends the run holding the best-epoch weights.
    CHECK(ef_mse(model, val) == doctest::Approx(result.best_val_mse).epsilon(1e-9));
    double best = 1e30;
    for (double v : result.val_curve) best = std::min(best, v);
    CHECK(result.best_val_mse == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("train_ef is deterministic for a fixed seed") {
    auto cfg = tiny_backbone();
    std::vector<EFSample> train, val;
    for (uint64_t i = 0; i < 3; ++i) train.push_back(sample_for(cfg, 50 + i, 40.0 + 10.0 * i));
    val.push_back(sample_for(cfg, 60, 50.0));
    EFTrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.epochs = 4;
    tcfg.lr = 1e-3;
    tcfg.seed = 22;

    auto m1 = build_ef_model(cfg, 23);
    auto r1 = train_ef(m1, train, val, tcfg);
    auto m2 = build_ef_model(cfg, 23);
    auto r2 = train_ef(m2, train, val, tcfg);
    CHECK(r1.val_curve == r2.val_curve);
    CHECK(r1.best_epoch == r2.best_epoch);
    auto p1 = m1->named_parameters();
    auto p2 = m2->named_parameters();
    for (const auto& item : p1) CHECK(torch::equal(item.value(), p2[item.key()]));
}

TEST_CASE("train_ef input validation") {
    auto cfg = tiny_backbone();
    auto model = build_ef_model(cfg, 24);
    std::vector<EFSample> val = {sample_for(cfg, 70, 50.0)};
    EFTrainConfig tcfg;
    CHECK_THROWS_AS(train_ef(model, {}, val, tcfg), DataEmpty);
    std::vector<EFSample> train = {sample_for(cfg, 71, 50.0)};
    CHECK_THROWS_AS(train_ef(model, train, {}, tcfg), DataEmpty);
    auto bad = tcfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(train_ef(model, train, val, bad), InvalidConfig);
    bad = tcfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train_ef(model, train, val, bad), InvalidConfig);
    bad = tcfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(train_ef(model, train, val, bad), InvalidConfig);
    CHECK_THROWS_AS(ef_mse(model, {}), DataEmpty);
}

TEST_CASE("run_grid sweeps every config and keeps the best-validation model") {
    auto cfg = tiny_backbone();
    std::vector<EFSample> train, val;
    for (uint64_t i = 0; i < 3; ++i) train.push_back(sample_for(cfg, 110 + i, 55.0));
    val.push_back(sample_for(cfg, 120, 55.0));
    EFGrid grid;
    grid.batch_sizes = {3};
    grid.epochs = {1, 6};
    grid.lrs = {1e-2};
    auto outcome = run_grid(cfg, train, val, grid, 31);
    REQUIRE(outcome.val_mses.size() == 2);
    const double best = *std::min_element(outcome.val_mses.begin(), outcome.val_mses.end());
    CHECK(outcome.val_mses[outcome.best_index] == best);
    CHECK(outcome.best_result.best_val_mse == best);
    auto configs = enumerate_grid(grid, 31);
    CHECK(outcome.best_config.epochs == configs[outcome.best_index].epochs);
    REQUIRE(outcome.best_model);
    // The winning model is returned with its best weights in place.
    CHECK(ef_mse(outcome.best_model, val) == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("evaluate_ef produces per-case rows and clamps reported predictions") {
    auto cfg = canonical_backbone();
    auto model = build_ef_model(cfg, 25);
    pin_head_bias(model, 100.0);  // raw prediction ~2550 percent
    std::vector<CaseRecord> cases(3);
    for (int i = 0; i < 3; ++i) {
        cases[i].a4c = clip_for(cfg, 80 + static_cast<uint64_t>(i), View::a4c);
        cases[i].a4c.case_id = "case_" + std::to_string(i);
        cases[i].ef_true = 30.0 + 15.0 * i;
    }
    cases[0].a2c = clip_for(cfg, 90, View::a2c);

    auto rep = evaluate_ef(model, cases, EFMode::single_plane);
    REQUIRE(rep.rows.size() == 3);
    for (const auto& row : rep.rows) CHECK(row.ef_pred == 100.0);
    CHECK(rep.rows[0].case_id == "case_0");
    CHECK(rep.rows[1].ef_true == 45.0);
    pin_head_bias(model, -100.0);
    auto low = evaluate_ef(model, cases, EFMode::single_plane);
    for (const auto& row : low.rows) CHECK(row.ef_pred == 0.0);

    // Biplane mode skips cases without a second view; with one row left the
    // metrics cannot be formed, so LengthMismatch is the correct outcome.
    CHECK_THROWS_AS(evaluate_ef(model, cases, EFMode::biplane), LengthMismatch);
    cases[1].a2c = clip_for(cfg, 91, View::a2c);
    auto rep2 = evaluate_ef(model, cases, EFMode::biplane);
    CHECK(rep2.rows.size() == 2);

    auto table = rep.to_table();
    CHECK(table.find("case_0") != std::string::npos);
    CHECK(table.find("case_2") != std::string::npos);
    auto j = rep.to_json();
    CHECK(j.at("cases").size() == 3);
    CHECK(j.contains("r2"));
    CHECK(j.contains("mae"));
    CHECK(j.contains("rmse"));
}

TEST_CASE("EF model round-trips through its checkpoint file") {
    auto dir = fs::temp_directory_path() / "echosynth_ef_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);

    auto cfg = tiny_backbone();
    auto model = build_ef_model(cfg, 33);
    nlohmann::json prov{{"seed", 33}, {"note", "unit test"}};
    save_ef_model(model, prov, dir / "ef.esck");

    auto loaded = load_ef_model(dir / "ef.esck");
    CHECK(loaded.config.frames == cfg.frames);
    CHECK(loaded.config.input_size == cfg.input_size);
    CHECK(loaded.provenance.at("seed") == 33);
    auto pa = model->named_parameters();
    auto pb = loaded.model->named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (const auto& item : pa) CHECK(torch::equal(item.value(), pb[item.key()]));

    // A checkpoint of a different kind is rejected; a missing file surfaces
    // as a missing artifact.
    CheckpointData other;
    other.meta = nlohmann::json{{"schema_version", 1}, {"kind", "trainer"}};
    other.add("x", torch::zeros({2}));
    write_checkpoint(dir / "other.esck", other);
    CHECK_THROWS_AS(load_ef_model(dir / "other.esck"), ParseError);
    CHECK_THROWS_AS(load_ef_model(dir / "absent.esck"), MissingArtifact);
    fs::remove_all(dir);
}

TEST_CASE("an overfit model recovers the EF of its single training case") {
    // Training to convergence on one case must pin the prediction within
    // 2 EF points of the label (MSE < 4 percent^2).
    auto cfg = tiny_backbone();
    auto model = build_ef_model(cfg, 26);
    std::vector<EFSample> one = {sample_for(cfg, 100, 63.0)};
    EFTrainConfig tcfg;
    tcfg.batch_size = 1;
    tcfg.epochs = 120;
    tcfg.lr = 1e-2;
    tcfg.seed = 27;
    auto result = train_ef(model, one, one, tcfg);
    CHECK(result.best_val_mse < 4.0);
    CHECK(ef_mse(model, one) < 4.0);
}

}  // TEST_SUITE
