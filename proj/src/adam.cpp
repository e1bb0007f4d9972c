#include "echosynth/adam.hpp"

#include <cmath>

#include "echosynth/errors.hpp"

namespace echosynth {

Adam::Adam(NamedParams params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw InvalidConfig("optimizer needs at least one parameter");
    for (const auto& [name, p] : params_) {
        m_.push_back(torch::zeros_like(p));
        v_.push_back(torch::zeros_like(p));
    }
}

void Adam::step(double lr) {
    torch::NoGradGuard guard;
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        if (!p.grad().defined()) continue;
        auto g = p.grad();
        if (cfg_.weight_decay != 0.0) g = g + cfg_.weight_decay * p;
        m_[i].mul_(cfg_.beta1).add_(g, 1.0 - cfg_.beta1);
        v_[i].mul_(cfg_.beta2).addcmul_(g, g, 1.0 - cfg_.beta2);
        auto m_hat = m_[i] / bc1;
        auto v_hat = v_[i] / bc2;
        p.add_(m_hat / (v_hat.sqrt() + cfg_.eps), -lr);
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_)
        if (p.grad().defined()) p.grad().zero_();
}

NamedParams Adam::state_tensors() const {
    NamedParams out;
    for (size_t i = 0; i < params_.size(); ++i) {
        out.emplace_back("adam.m." + params_[i].first, m_[i]);
        out.emplace_back("adam.v." + params_[i].first, v_[i]);
    }
    out.emplace_back("adam.step", torch::tensor({step_count_}, torch::kInt64));
    return out;
}

void Adam::load_state(const NamedParams& state) {
    torch::NoGradGuard guard;
    auto find = [&state](const std::string& key) -> const torch::Tensor* {
        for (const auto& [name, t] : state)
            if (name == key) return &t;
        return nullptr;
    };
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto* m = find("adam.m." + params_[i].first);
        const auto* v = find("adam.v." + params_[i].first);
        if (!m || !v) throw ParseError("optimizer state is missing moments for " + params_[i].first);
        if (!m->sizes().equals(m_[i].sizes()) || !v->sizes().equals(v_[i].sizes()))
            throw ShapeMismatch("optimizer state shape mismatch for " + params_[i].first);
        m_[i].copy_(*m);
        v_[i].copy_(*v);
    }
    const auto* step = find("adam.step");
    if (!step) throw ParseError("optimizer state is missing the step counter");
    step_count_ = step->item<int64_t>();
}

}  // namespace echosynth
