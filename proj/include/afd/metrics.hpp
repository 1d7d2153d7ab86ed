#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace afd {

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, with ties credited one half. Undefined for single-class input.
inline std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double positives = 0.0, negatives = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                positives += 1.0;
                rank_sum += mid_rank;
            } else {
                negatives += 1.0;
            }
        }
        i = j;
    }
    if (positives == 0.0 || negatives == 0.0) return std::nullopt;
    return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

/// Fraction of predictions (probability >= 0.5 means forged) matching the label.
inline double accuracy(std::span<const double> probabilities, std::span<const int> labels) {
    if (probabilities.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
    if (probabilities.empty()) throw std::invalid_argument("accuracy: empty input");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += ((probabilities[i] >= 0.5 ? 1 : 0) == labels[i]);
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace afd
