#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace echosynth {

// Named parameter list, ordered so serialization is deterministic.
using NamedParams = std::vector<std::pair<std::string, torch::Tensor>>;

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // classic L2, added to the gradient
};

// Plain Adam with bias correction. Hand-rolled so the first/second moments
// can be exported and restored exactly, which makes checkpoint resume
// bitwise reproducible. The learning rate is passed per step because the
// trainer owns the warmup/cosine schedule.
class Adam {
public:
    Adam(NamedParams params, AdamConfig cfg = {});

    void step(double lr);
    void zero_grad();
    int64_t step_count() const { return step_count_; }
    const NamedParams& params() const { return params_; }

    // Moments plus the step counter, keyed for the checkpoint container.
    NamedParams state_tensors() const;
    void load_state(const NamedParams& state);

private:
    NamedParams params_;
    AdamConfig cfg_;
    std::vector<torch::Tensor> m_, v_;
    int64_t step_count_ = 0;
};

}  // namespace echosynth
