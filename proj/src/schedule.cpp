#include "echosynth/schedule.hpp"

#include <cmath>

#include "echosynth/errors.hpp"

namespace echosynth {

const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ParseError("unknown schedule kind '" + s + "'");
}

double NoiseSchedule::beta_t(int64_t t) const {
    if (t < 1 || t > T) throw StepOutOfRange("t=" + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return beta[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha_t(int64_t t) const { return 1.0 - beta_t(t); }

double NoiseSchedule::alpha_bar_t(int64_t t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > T) throw StepOutOfRange("t=" + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return alpha_bar[static_cast<size_t>(t - 1)];
}

NoiseSchedule make_schedule(ScheduleKind kind, int64_t T, double beta_start, double beta_end) {
    if (T < 1) throw InvalidScheduleParams("T must be >= 1");
    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(static_cast<size_t>(T));

    if (kind == ScheduleKind::linear) {
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
            throw InvalidScheduleParams("need 0 < beta_start <= beta_end < 1");
        }
        if (T == 1) {
            s.beta[0] = beta_start;
        } else {
            const double step = (beta_end - beta_start) / static_cast<double>(T - 1);
            for (int64_t i = 0; i < T; ++i) s.beta[static_cast<size_t>(i)] = beta_start + step * static_cast<double>(i);
        }
    } else {
        const auto abar = [](double u) {
            const double v = std::cos((u + 0.008) / 1.008 * M_PI / 2.0);
            return v * v;
        };
        for (int64_t i = 0; i < T; ++i) {
            const double u1 = static_cast<double>(i) / static_cast<double>(T);
            const double u2 = static_cast<double>(i + 1) / static_cast<double>(T);
            s.beta[static_cast<size_t>(i)] = std::min(1.0 - abar(u2) / abar(u1), 0.999);
        }
    }

    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (size_t i = 0; i < static_cast<size_t>(T); ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    return s;
}

NoiseSchedule make_scaled_linear_schedule(int64_t T) {
    if (T < 1) throw InvalidScheduleParams("T must be >= 1");
    const double scale = 1000.0 / static_cast<double>(T);
    return make_schedule(ScheduleKind::linear, T, scale * 1e-4, std::min(scale * 0.02, 0.999));
}

}  // namespace echosynth
