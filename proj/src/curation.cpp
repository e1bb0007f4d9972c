#include "echosynth/curation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "echosynth/clip_io.hpp"
#include "echosynth/diffusion.hpp"
#include "echosynth/errors.hpp"
#include "echosynth/rng.hpp"

namespace echosynth {

CandidateRanking generate_candidates(const CaseRecord& cs, DenoiserNet& host,
                                     ControlNetBranch& branch, const NoiseSchedule& schedule,
                                     EFRegressor& ef_model, int64_t n, uint64_t seed,
                                     int64_t batch_size) {
    if (n < 1) throw InvalidConfig("need at least one candidate per case");
    if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
    validate_clip(cs.a4c);
    torch::NoGradGuard guard;
    host->eval();
    branch->eval();

    CandidateRanking ranking;
    ranking.case_id = cs.a4c.case_id;
    ranking.ef_true = cs.ef_true;

    auto cond_one = make_condition(cs.a4c.frames);  // [1, 2, T, H, W]
    std::vector<int64_t> x_shape = {kClipChannels, kClipFrames, kClipSize, kClipSize};

    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t stop = std::min(start + batch_size, n);
        std::vector<torch::Generator> gens;
        for (int64_t i = start; i < stop; ++i) gens.push_back(make_generator(derive_seed(seed, i)));
        auto cond = cond_one.expand({stop - start, -1, -1, -1, -1}).contiguous();
        auto denoiser = [&](const torch::Tensor& x_t, int64_t t) {
            // Scalar t broadcasts to the batch inside the networks.
            auto tt = torch::scalar_tensor(t, torch::kInt64);
            return conditional_forward(host, branch, x_t, tt, cond);
        };
        auto batch = sample_loop_batch(denoiser, schedule, x_shape, gens);
        for (int64_t i = start; i < stop; ++i) {
            Candidate cand;
            cand.sample_index = i;
            cand.clip.frames = input_to_clip(batch.slice(0, i - start, i - start + 1));
            cand.clip.view = View::a2c;
            cand.clip.case_id = cs.a4c.case_id;
            cand.clip.frame_rate = cs.a4c.frame_rate;
            cand.ef_pred = predict_ef(ef_model, cand.clip);
            cand.abs_error = std::abs(cand.ef_pred - cs.ef_true);
            ranking.candidates.push_back(std::move(cand));
        }
    }
    return ranking;
}

CandidateRanking select_top_k(CandidateRanking ranking, int64_t k) {
    if (k < 0) throw InvalidConfig("k must be >= 0");
    std::vector<size_t> order(ranking.candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const auto& ca = ranking.candidates[a];
        const auto& cb = ranking.candidates[b];
        if (ca.abs_error != cb.abs_error) return ca.abs_error < cb.abs_error;
        return ca.sample_index < cb.sample_index;
    });
    ranking.selected.clear();
    const size_t keep = std::min<size_t>(static_cast<size_t>(k), order.size());
    for (size_t i = 0; i < keep; ++i)
        ranking.selected.push_back(ranking.candidates[order[i]].sample_index);
    return ranking;
}

std::vector<std::string> write_selected(CandidateRanking& ranking,
                                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> paths;
    for (int64_t idx : ranking.selected) {
        auto it = std::find_if(ranking.candidates.begin(), ranking.candidates.end(),
                               [idx](const Candidate& c) { return c.sample_index == idx; });
        if (it == ranking.candidates.end())
            throw MissingSelection("selected index " + std::to_string(idx) + " has no candidate");
        char name[64];
        std::snprintf(name, sizeof(name), "%s_s%02lld.ecl", ranking.case_id.c_str(),
                      static_cast<long long>(idx));
        write_clip(dir / name, it->clip);
        it->path = name;
        paths.push_back(name);
    }
    return paths;
}

const char* to_string(AugmentMode m) {
    return m == AugmentMode::synthetic_only ? "synthetic_only" : "real_plus_synthetic";
}

AugmentMode augment_mode_from_string(const std::string& s) {
    if (s == "synthetic_only") return AugmentMode::synthetic_only;
    if (s == "real_plus_synthetic") return AugmentMode::real_plus_synthetic;
    throw ParseError("unknown augmentation mode: " + s);
}

DatasetManifest build_augmented_manifest(const DatasetManifest& base,
                                         const std::vector<CandidateRanking>& rankings,
                                         AugmentMode mode) {
    DatasetManifest out;
    out.schema_version = base.schema_version;
    out.split_seed = base.split_seed;
    for (const auto& rec : base.records) {
        if (rec.split != Split::train) {
            out.records.push_back(rec);
            continue;
        }
        const CandidateRanking* ranking = nullptr;
        for (const auto& r : rankings)
            if (r.case_id == rec.case_id) {
                ranking = &r;
                break;
            }
        if (!ranking || ranking->selected.empty())
            throw MissingSelection("train case " + rec.case_id + " has no selected candidates");
        if (mode == AugmentMode::real_plus_synthetic) out.records.push_back(rec);
        for (int64_t idx : ranking->selected) {
            const Candidate* cand = nullptr;
            for (const auto& c : ranking->candidates)
                if (c.sample_index == idx) {
                    cand = &c;
                    break;
                }
            if (!cand)
                throw MissingSelection("selected index " + std::to_string(idx) +
                                       " missing from candidates of " + rec.case_id);
            if (cand->path.empty())
                throw MissingArtifact("selected candidate " + std::to_string(idx) + " of " +
                                      rec.case_id + " was never written to disk");
            ManifestEntry entry = rec;
            entry.provenance = Provenance::synthetic;
            entry.a2c_path = cand->path;
            entry.variant = "s" + std::to_string(idx);
            out.records.push_back(entry);
        }
    }
    return out;
}

std::string curation_report(const std::vector<CandidateRanking>& rankings) {
    std::ostringstream os;
    os << "case_id          ef_true  candidate  ef_pred  abs_error  selected\n";
    char buf[160];
    for (const auto& r : rankings) {
        for (const auto& c : r.candidates) {
            const bool sel =
                std::find(r.selected.begin(), r.selected.end(), c.sample_index) != r.selected.end();
            std::snprintf(buf, sizeof(buf), "%-16s %7.2f  %9lld  %7.2f  %9.3f  %s\n",
                          r.case_id.c_str(), r.ef_true, static_cast<long long>(c.sample_index),
                          c.ef_pred, c.abs_error, sel ? "yes" : "");
            os << buf;
        }
    }
    return os.str();
}

}  // namespace echosynth
