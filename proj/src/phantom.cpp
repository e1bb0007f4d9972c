#include "echosynth/phantom.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "echosynth/clip_io.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

namespace {

constexpr double kChamberLevel = 0.10;
constexpr double kWallLevel = 0.95;
constexpr double kBackgroundLevel = 0.55;
constexpr double kSeptumLevel = 0.30;
constexpr double kEdgeWidth = 1.5;    // soft-edge half width, render px
constexpr double kWallThickness = 4.0;  // render px
constexpr double kRayleighMean = 1.2533141373155003;  // sqrt(pi/2)

struct ViewParams {
    double aspect;     // a / b of the chamber ellipse
    double rotation;   // radians
    bool septum;       // dark band suggesting the 4-chamber crux
};

ViewParams view_params(ViewGeometry g) {
    if (g == ViewGeometry::four_chamber_like) return {1.35, 0.0, true};
    return {0.72, 0.30, false};
}

// Soft coverage of the ellipse interior: 1 inside, 0 outside, ~linear ramp
// of width 2*kEdgeWidth across the boundary. Distance to the implicit
// boundary is approximated by q / |grad q|.
torch::Tensor ellipse_coverage(const torch::Tensor& xr, const torch::Tensor& yr, const torch::Tensor& a,
                               const torch::Tensor& b) {
    auto q = (xr / a).pow(2) + (yr / b).pow(2) - 1.0;
    auto grad = 2.0 * torch::sqrt((xr / (a * a)).pow(2) + (yr / (b * b)).pow(2)).clamp_min(1e-6);
    auto d = q / grad;
    return (0.5 - d / (2.0 * kEdgeWidth)).clamp(0.0, 1.0);
}

}  // namespace

void validate_spec(const PhantomSpec& spec) {
    if (!(spec.area_es > 0.0) || !(spec.area_es < spec.area_ed)) {
        throw InvalidSpec("need 0 < area_es < area_ed, got area_es=" + std::to_string(spec.area_es) +
                          " area_ed=" + std::to_string(spec.area_ed));
    }
    if (spec.cycle_frames < 2 || spec.cycle_frames % 2 != 0) {
        throw InvalidSpec("cycle_frames must be even and >= 2 so end-systole lands on a frame");
    }
    if (spec.noise_sigma < 0.0) throw InvalidSpec("noise_sigma must be >= 0");
    const double ef = phantom_ef(spec);
    if (!(ef > 0.0 && ef < 100.0)) throw InvalidSpec("derived EF outside (0, 100)");
}

double phantom_ef(const PhantomSpec& spec) {
    const double ved = std::pow(spec.area_ed, 1.5);
    const double ves = std::pow(spec.area_es, 1.5);
    return 100.0 * (ved - ves) / ved;
}

double area_es_for_ef(double area_ed, double ef_percent) {
    return area_ed * std::pow(1.0 - ef_percent / 100.0, 2.0 / 3.0);
}

torch::Tensor render_phantom_video(const PhantomSpec& spec) {
    validate_spec(spec);
    const int64_t n = kWindowFrames;  // raw length; phase repeats every cycle_frames
    const int64_t hw = kPhantomRenderSize;
    const double render_scale = static_cast<double>(hw) / static_cast<double>(kClipSize);

    auto gen = make_generator(static_cast<uint64_t>(spec.rng_seed));
    auto jitter = torch::rand({3}, gen);  // center x/y, rotation
    const auto vp = view_params(spec.view_geometry);
    const double cx = hw / 2.0 + (jitter[0].item<double>() - 0.5) * 8.0;
    const double cy = hw / 2.0 + (jitter[1].item<double>() - 0.5) * 8.0;
    const double theta = vp.rotation + (jitter[2].item<double>() - 0.5) * 0.2;

    auto ys = torch::arange(hw, torch::kFloat32).add(0.5 - cy).reshape({hw, 1});
    auto xs = torch::arange(hw, torch::kFloat32).add(0.5 - cx).reshape({1, hw});
    auto xr = (xs * std::cos(theta) + ys * std::sin(theta)).expand({hw, hw});
    auto yr = (-xs * std::sin(theta) + ys * std::cos(theta)).expand({hw, hw});

    // Per-frame chamber area trace (64x64 units), cosine between ED and ES.
    auto t = torch::arange(n, torch::kFloat64);
    auto phase = 0.5 * (1.0 + torch::cos(2.0 * M_PI * t / static_cast<double>(spec.cycle_frames)));
    auto area = (spec.area_es + (spec.area_ed - spec.area_es) * phase) * render_scale * render_scale;

    auto a_in = torch::sqrt(area * vp.aspect / M_PI).to(torch::kFloat32).reshape({n, 1, 1});
    auto b_in = (a_in / vp.aspect);
    auto a_out = a_in + kWallThickness;
    auto b_out = b_in + kWallThickness;

    auto f_in = ellipse_coverage(xr.unsqueeze(0), yr.unsqueeze(0), a_in, b_in);
    auto f_out = ellipse_coverage(xr.unsqueeze(0), yr.unsqueeze(0), a_out, b_out);

    auto img = kBackgroundLevel * (1.0 - f_out) + kWallLevel * (f_out - f_in) + kChamberLevel * f_in;
    if (vp.septum) {
        const double half_w = 1.6;
        auto band = (0.5 - (xr.abs() - half_w) / (2.0 * kEdgeWidth)).clamp(0.0, 1.0).unsqueeze(0);
        auto w = band * f_in;
        img = img * (1.0 - w) + kSeptumLevel * w;
    }
    if (spec.noise_sigma > 0.0) {
        auto u = torch::rand({n, hw, hw}, gen).clamp_min(1e-12);
        auto rayleigh = torch::sqrt(-2.0 * torch::log(u));
        img = img * (1.0 + spec.noise_sigma * (rayleigh / kRayleighMean - 1.0));
    }
    return img.clamp(0.0, 1.0).unsqueeze(1).contiguous();  // [N, 1, H, W]
}

double measure_chamber_area(const torch::Tensor& frame, int64_t render_size) {
    auto f = frame.squeeze();
    if (f.dim() != 2) throw ShapeMismatch("expected a single frame");
    if (f.min().item<double>() < -0.01) f = (f + 1.0) / 2.0;  // [-1,1] -> [0,1]
    const double threshold = 0.5 * (kChamberLevel + kWallLevel);
    const double scale = static_cast<double>(render_size) / static_cast<double>(kClipSize);
    return (f < threshold).sum().item<double>() / (scale * scale);
}

CaseRecord generate_phantom_case(const PhantomSpec& spec, const std::string& case_id) {
    validate_spec(spec);
    const double frame_rate = 30.0;

    PhantomSpec a4c_spec = spec;
    a4c_spec.view_geometry = ViewGeometry::four_chamber_like;
    a4c_spec.rng_seed = static_cast<int64_t>(derive_seed(static_cast<uint64_t>(spec.rng_seed), 1));
    PhantomSpec a2c_spec = spec;
    a2c_spec.view_geometry = ViewGeometry::two_chamber_like;
    a2c_spec.rng_seed = static_cast<int64_t>(derive_seed(static_cast<uint64_t>(spec.rng_seed), 2));

    CaseRecord rec;
    rec.a4c = preprocess_clip(render_phantom_video(a4c_spec), 0, View::a4c, case_id, frame_rate);
    rec.a2c = preprocess_clip(render_phantom_video(a2c_spec), 0, View::a2c, case_id, frame_rate);
    rec.ef_true = phantom_ef(spec);
    rec.provenance = Provenance::phantom;
    validate_case(rec);
    return rec;
}

DatasetManifest generate_phantom_dataset(const PhantomDatasetConfig& cfg, const std::filesystem::path& out_dir) {
    if (!(cfg.ef_lo > 0.0 && cfg.ef_hi < 100.0 && cfg.ef_lo <= cfg.ef_hi)) {
        throw InvalidSpec("ef range must satisfy 0 < lo <= hi < 100");
    }
    std::filesystem::create_directories(out_dir / "clips");
    auto gen = make_generator(static_cast<uint64_t>(cfg.seed));

    DatasetManifest manifest;
    manifest.split_seed = cfg.seed;
    const int64_t total = cfg.n_train + cfg.n_val + cfg.n_test;
    for (int64_t i = 0; i < total; ++i) {
        auto u = torch::rand({2}, gen);
        PhantomSpec spec;
        spec.area_ed = cfg.area_ed_lo + u[1].item<double>() * (cfg.area_ed_hi - cfg.area_ed_lo);
        const double ef = cfg.ef_lo + u[0].item<double>() * (cfg.ef_hi - cfg.ef_lo);
        spec.area_es = area_es_for_ef(spec.area_ed, ef);
        spec.noise_sigma = cfg.noise_sigma;
        spec.rng_seed = static_cast<int64_t>(derive_seed(static_cast<uint64_t>(cfg.seed), 1000 + i));

        std::ostringstream id;
        id << "ph" << std::setw(5) << std::setfill('0') << i;
        auto rec = generate_phantom_case(spec, id.str());
        rec.split = i < cfg.n_train ? Split::train : (i < cfg.n_train + cfg.n_val ? Split::val : Split::test);

        ManifestEntry e;
        e.case_id = id.str();
        e.ef_true = rec.ef_true;
        e.split = rec.split;
        e.provenance = Provenance::phantom;
        e.a4c_path = "clips/" + id.str() + "_a4c.ecl";
        e.a2c_path = "clips/" + id.str() + "_a2c.ecl";
        write_clip(out_dir / e.a4c_path, rec.a4c);
        write_clip(out_dir / *e.a2c_path, *rec.a2c);
        manifest.records.push_back(std::move(e));
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

}  // namespace echosynth
