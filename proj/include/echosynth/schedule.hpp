#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace echosynth {

enum class ScheduleKind { linear, cosine };

const char* to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

// Per-step variances and their cumulative products. Steps are 1-based:
// beta_t(t) for t in [1, T], alpha_bar_t(0) == 1 by convention.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear;
    int64_t T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta;       // beta[i] = beta_{i+1}
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative product of alpha

    double beta_t(int64_t t) const;
    double alpha_t(int64_t t) const;
    double alpha_bar_t(int64_t t) const;  // accepts t = 0
};

// Linear: beta evenly spaced over [beta_start, beta_end].
// Cosine: betas derived from the squared-cosine alpha_bar curve, capped at
// 0.999; beta_start/beta_end are ignored for this kind.
NoiseSchedule make_schedule(ScheduleKind kind, int64_t T, double beta_start = 1e-4, double beta_end = 0.02);

// Linear schedule rescaled so that total noise destruction is comparable
// across step counts (beta range scaled by 1000/T).
NoiseSchedule make_scaled_linear_schedule(int64_t T);

}  // namespace echosynth
