#pragma once

#include "afd/tensor.hpp"

#include <cstring>
#include <functional>
#include <string>
#include <vector>

namespace afd {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    // Entries whose central difference straddles a ReLU/hinge kink; excluded from the max.
    std::size_t flagged = 0;
    std::size_t worst_param = 0;
    std::size_t worst_entry = 0;
};

namespace detail {

struct KinkProbe {
    double value;
    std::uint64_t pattern;
};

inline KinkProbe probe(const std::function<Tensor()>& f) {
    NoGradGuard no_grad;
    auto& state = graph_state();
    const bool previous = state.track_kinks;
    state.track_kinks = true;
    state.kink_hash = 1469598103934665603ULL;
    const double v = f().item();
    const std::uint64_t pattern = state.kink_hash;
    state.track_kinks = previous;
    return {v, pattern};
}

}  // namespace detail

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences. Relative error per entry is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

    const auto first = detail::probe(f);
    const auto second = detail::probe(f);
    if (std::memcmp(&first.value, &second.value, sizeof(double)) != 0)
        throw std::invalid_argument("finite_diff_check: function is not deterministic");

    for (auto& p : params) p.zero_grad();
    backward(f());
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                           : std::vector<double>(p.numel(), 0.0));
        p.zero_grad();
    }

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto values = params[pi].mutable_data();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + eps;
            const auto up = detail::probe(f);
            values[k] = saved - eps;
            const auto down = detail::probe(f);
            values[k] = saved;
            if (up.pattern != down.pattern) {
                ++report.flagged;
                continue;
            }
            const double numeric = (up.value - down.value) / (2.0 * eps);
            const double a = analytic[pi][k];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            ++report.checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_entry = k;
            }
        }
    }
    return report;
}

}  // namespace afd
