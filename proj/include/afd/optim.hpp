#pragma once

#include "afd/tensor.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace afd {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    std::vector<double> first;
    std::vector<double> second;
};

/// One bias-corrected Adam update for every parameter, in place. `step` is
/// 1-based. Parameters without an accumulated gradient see a zero gradient.
inline void adam_step(std::vector<NamedTensor>& params, std::vector<AdamMoments>& moments, double lr, std::size_t step,
                      const AdamConfig& cfg = {}) {
    if (step < 1) throw std::invalid_argument("adam_step: step is 1-based");
    if (moments.empty()) moments.resize(params.size());
    if (moments.size() != params.size()) throw std::invalid_argument("adam_step: moment count does not match parameters");

    for (const auto& p : params)
        for (double g : p.tensor.grad())
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);

    const double t = static_cast<double>(step);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto values = params[i].tensor.mutable_data();
        auto grad = params[i].tensor.grad();
        auto& m = moments[i];
        if (m.first.empty()) {
            m.first.assign(values.size(), 0.0);
            m.second.assign(values.size(), 0.0);
        }
        if (m.first.size() != values.size())
            throw std::invalid_argument("adam_step: moment shape mismatch for " + params[i].name);
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double g = grad.empty() ? 0.0 : grad[k];
            m.first[k] = cfg.beta1 * m.first[k] + (1.0 - cfg.beta1) * g;
            m.second[k] = cfg.beta2 * m.second[k] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m.first[k] / correction1;
            const double vhat = m.second[k] / correction2;
            values[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

/// 0.5 * lr0 * (1 + cos(pi * step / total)); steps past the end clamp to the final value.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (total_steps == 0) return lr0;
    const double s = static_cast<double>(std::min(step, total_steps));
    return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * s / static_cast<double>(total_steps)));
}

}  // namespace afd
