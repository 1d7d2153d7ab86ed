#pragma once

// Two-phase training: soft-mask decomposition with attention fusion over a
// fixed DCT, then fine-tuning with learnable transform layers. Plus ACC/AUC
// evaluation and the ablation grids.

#include "afd/checkpoint.hpp"
#include "afd/config.hpp"
#include "afd/metrics.hpp"
#include "afd/model.hpp"
#include "afd/optim.hpp"
#include "afd/synth.hpp"

#include <json.hpp>

#include <chrono>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace afd {

struct Metrics {
    double acc = 0.0;
    std::optional<double> auc;
    std::size_t count = 0;
};

struct DomainMetrics {
    int domain = 0;
    Metrics metrics;
};

struct EvalReport {
    Metrics whole;
    std::vector<DomainMetrics> per_domain;
    std::vector<double> scores;  // sigmoid outputs in index order
    std::vector<int> labels;
};

/// Raw logits for the given samples, computed without recording a graph.
inline std::vector<double> predict_logits(const TwoBranchModel& model, const Corpus& corpus,
                                          std::span<const std::size_t> indices, std::size_t batch = 32) {
    NoGradGuard no_grad;
    std::vector<double> out;
    out.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size(); start += batch) {
        const auto chunk = indices.subspan(start, std::min(batch, indices.size() - start));
        const auto logits = model.forward(to_batch(corpus, chunk)).logits;
        out.insert(out.end(), logits.values().begin(), logits.values().end());
    }
    return out;
}

inline Metrics score_metrics(std::span<const double> scores, std::span<const int> labels) {
    return {accuracy(scores, labels), auc(scores, labels), labels.size()};
}

/// Whole-split ACC/AUC plus one row per domain that mixes that domain's
/// forgeries with every pristine image of the split.
inline EvalReport evaluate(const TwoBranchModel& model, const Corpus& corpus, Split split, std::size_t batch = 32) {
    const auto indices = corpus.indices(split);
    if (indices.empty()) throw std::invalid_argument(std::string("evaluate: split '") + to_string(split) + "' is empty");
    const auto logits = predict_logits(model, corpus, indices, batch);
    EvalReport report;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        report.scores.push_back(stable_sigmoid(logits[k]));
        report.labels.push_back(corpus.samples[indices[k]].label);
    }
    report.whole = score_metrics(report.scores, report.labels);

    std::set<int> domains;
    for (auto i : indices)
        if (corpus.samples[i].label == 1) domains.insert(corpus.samples[i].domain);
    for (int d : domains) {
        std::vector<double> s;
        std::vector<int> l;
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const auto& sample = corpus.samples[indices[k]];
            if (sample.label == 0 || sample.domain == d) {
                s.push_back(report.scores[k]);
                l.push_back(report.labels[k]);
            }
        }
        report.per_domain.push_back({d, score_metrics(s, l)});
    }
    return report;
}

inline EvalReport evaluate(const Checkpoint& ckpt, const Corpus& corpus, Split split) {
    const auto model = model_from_checkpoint(ckpt);
    return evaluate(model, corpus, split, ckpt.config.train.eval_batch);
}

inline nlohmann::ordered_json to_json(const Metrics& m) {
    nlohmann::ordered_json j;
    j["acc"] = m.acc;
    j["auc"] = m.auc ? nlohmann::ordered_json(*m.auc) : nlohmann::ordered_json(nullptr);
    j["count"] = m.count;
    return j;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["whole"] = to_json(r.whole);
    auto rows = nlohmann::ordered_json::array();
    for (const auto& d : r.per_domain) {
        auto row = to_json(d.metrics);
        row["domain"] = d.domain;
        rows.push_back(row);
    }
    j["per_domain"] = rows;
    return j;
}

/// Largest |sum_i M_i - 1| over the grid; 0 when the model has no masks.
inline double partition_deviation(const TwoBranchModel& model) {
    if (!model.has_frequency_branch()) return 0.0;
    NoGradGuard no_grad;
    const auto& bank = model.mask_bank();
    const auto masks = masks_from_logits(bank);
    const std::size_t plane = bank.height * bank.width;
    double worst = 0.0;
    for (std::size_t k = 0; k < plane; ++k) {
        double total = 0.0;
        for (std::size_t i = 0; i < bank.n; ++i) total += masks.at(i * plane + k);
        worst = std::max(worst, std::abs(total - 1.0));
    }
    return worst;
}

struct StepLosses {
    double total = 0.0;
    double ce = 0.0;
    double trip = 0.0;
};

/// Loss for one batch; the triplet term is present only when the model has a
/// frequency branch and gamma > 0.
inline std::pair<Tensor, StepLosses> batch_loss(const TwoBranchModel& model, const Tensor& images,
                                                std::span<const double> labels, const TrainConfig& cfg) {
    auto out = model.forward(images);
    Tensor trip;
    if (!out.embeddings.empty() && cfg.gamma > 0.0) trip = triplet_loss(out.embeddings, cfg.margin);
    auto loss = total_loss(out.logits, labels, trip, cfg.gamma);
    StepLosses parts;
    parts.total = loss.item();
    parts.trip = trip.defined() ? trip.item() : 0.0;
    parts.ce = parts.total - cfg.gamma * parts.trip;
    return {loss, parts};
}

struct TrainHooks {
    std::ostream* log = nullptr;  // one JSON object per line
    std::function<void(const TwoBranchModel&, std::size_t epoch)> on_epoch;
    std::function<void(const TwoBranchModel&, std::size_t step)> on_step;
};

namespace detail {

struct BatchData {
    Tensor images;
    std::vector<double> labels;
};

inline BatchData make_batch(const Corpus& corpus, std::span<const std::size_t> idx) {
    BatchData b{to_batch(corpus, idx), {}};
    for (auto i : idx) b.labels.push_back(static_cast<double>(corpus.samples[i].label));
    return b;
}

inline double optimize_step(TwoBranchModel& model, std::vector<NamedTensor>& params, std::vector<AdamMoments>& moments,
                            const BatchData& batch, const TrainConfig& cfg, double lr, std::size_t step,
                            StepLosses& losses) {
    model.zero_grad();
    auto [loss, parts] = batch_loss(model, batch.images, batch.labels, cfg);
    if (!std::isfinite(parts.total)) throw NumericError("non-finite loss at step " + std::to_string(step));
    backward(loss);
    adam_step(params, moments, lr, step);
    losses = parts;
    return parts.total;
}

inline void write_log(std::ostream* log, const nlohmann::ordered_json& j) {
    if (log) *log << j.dump() << '\n' << std::flush;
}

}  // namespace detail

inline std::size_t steps_per_epoch(const Corpus& corpus, std::size_t batch) {
    std::size_t fakes = 0;
    for (auto i : corpus.indices(Split::train)) fakes += corpus.samples[i].label == 1;
    return (2 * fakes + batch - 1) / batch;
}

/// Seed of the freshly initialised model that train_adad starts from.
inline std::uint64_t model_seed(const TrainConfig& cfg) { return mix_seed(cfg.seed, 0x4d4f44454cULL); }

/// Trains model, masks and attention jointly with the fixed DCT. Returns the
/// validation-best epoch (by AUC) unless select_best is off.
inline Checkpoint train_adad(const RunConfig& rc, const Corpus& corpus, const TrainHooks& hooks = {}) {
    const auto& cfg = rc.train;
    cfg.validate();
    if (corpus.height != cfg.model.height || corpus.width != cfg.model.width || corpus.channels != cfg.model.channels)
        throw std::invalid_argument("train_adad: corpus dimensions do not match the model configuration");
    TwoBranchModel model(cfg.model, model_seed(cfg));
    auto params = model.named_parameters();
    std::vector<AdamMoments> moments;

    const std::size_t per_epoch = steps_per_epoch(corpus, cfg.batch);
    if (per_epoch == 0) throw std::invalid_argument("train_adad: training split has no forged images");
    const std::size_t total_steps = per_epoch * cfg.adad_epochs;
    const bool has_val = !corpus.indices(Split::val).empty();

    std::size_t step = 0;
    double best_auc = -1.0;
    std::vector<NamedTensor> best_state;
    std::vector<NamedTensor> best_moments;
    std::size_t best_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.adad_epochs; ++epoch) {
        const auto order = balance_resample(corpus, Split::train, mix_seed(cfg.seed, epoch, 0x45504fULL));
        StepLosses sums, last;
        std::size_t batches = 0;
        double lr = cfg.lr0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const auto idx = std::span(order).subspan(start, std::min(cfg.batch, order.size() - start));
            lr = cosine_lr(step, total_steps, cfg.lr0);
            ++step;
            detail::optimize_step(model, params, moments, detail::make_batch(corpus, idx), cfg, lr, step, last);
            sums.total += last.total;
            sums.ce += last.ce;
            sums.trip += last.trip;
            ++batches;
            if (hooks.on_step) hooks.on_step(model, step);
        }
        const double n = static_cast<double>(batches);
        nlohmann::ordered_json line{{"phase", "adad"},         {"epoch", epoch + 1},        {"step", step},
                                    {"lr", lr},                {"loss", sums.total / n},    {"l_ce", sums.ce / n},
                                    {"l_trip", sums.trip / n}, {"partition_dev", partition_deviation(model)}};
        double val_auc = 0.0;
        if (has_val) {
            const auto val = evaluate(model, corpus, Split::val, cfg.eval_batch);
            val_auc = val.whole.auc.value_or(0.5);
            line["val_acc"] = val.whole.acc;
            line["val_auc"] = val.whole.auc ? nlohmann::ordered_json(*val.whole.auc) : nlohmann::ordered_json(nullptr);
        }
        detail::write_log(hooks.log, line);
        if (hooks.on_epoch) hooks.on_epoch(model, epoch + 1);
        if (!cfg.select_best || !has_val || val_auc > best_auc) {
            best_auc = val_auc;
            best_state = snapshot(model);
            best_moments = moments_to_tensors(params, moments);
            best_step = step;
        }
    }
    return {Phase::adad, best_step, rc, std::move(best_state), std::move(best_moments)};
}

/// Replaces the fixed DCT with learnable transform layers initialised from it
/// and fine-tunes for adat_iters steps at lr0 * adat_lr_scale under its own
/// cosine schedule. Logs every adat_eval_interval steps.
inline Checkpoint train_adat(const Checkpoint& adad, const Corpus& corpus, const TrainHooks& hooks = {},
                             std::optional<RunConfig> override_config = std::nullopt) {
    if (adad.phase != Phase::adad)
        throw std::invalid_argument("train_adat: input checkpoint has phase 'adat', expected 'adad'");
    RunConfig rc = override_config.value_or(adad.config);
    rc.train.model = adad.config.train.model;
    const auto& cfg = rc.train;
    cfg.validate();
    if (!cfg.model.frequency_branch) throw std::invalid_argument("train_adat: model has no frequency branch");

    auto model = model_from_checkpoint(adad);
    model.enable_adat();
    std::vector<NamedTensor> params;
    for (auto& p : model.named_parameters())
        if (cfg.unfreeze_all || p.name.starts_with("adat.")) params.push_back(p);
    std::vector<AdamMoments> moments;

    const double lr0 = cfg.lr0 * cfg.adat_lr_scale;
    const bool has_val = !corpus.indices(Split::val).empty();
    std::vector<std::size_t> order;
    std::size_t cursor = 0, epoch = 0;
    StepLosses window;
    std::size_t window_steps = 0;
    for (std::size_t step = 1; step <= cfg.adat_iters; ++step) {
        if (cursor + cfg.batch > order.size()) {
            order = balance_resample(corpus, Split::train, mix_seed(cfg.seed, epoch++, 0x41444154ULL));
            cursor = 0;
        }
        const auto idx = std::span(order).subspan(cursor, std::min(cfg.batch, order.size() - cursor));
        cursor += idx.size();
        const double lr = cosine_lr(step - 1, cfg.adat_iters, lr0);
        StepLosses last;
        detail::optimize_step(model, params, moments, detail::make_batch(corpus, idx), cfg, lr, step, last);
        window.total += last.total;
        window.ce += last.ce;
        window.trip += last.trip;
        ++window_steps;
        if (hooks.on_step) hooks.on_step(model, step);
        if (step % cfg.adat_eval_interval == 0) {
            const double n = static_cast<double>(window_steps);
            nlohmann::ordered_json line{{"phase", "adat"},         {"step", step},           {"lr", lr},
                                        {"loss", window.total / n}, {"l_ce", window.ce / n}, {"l_trip", window.trip / n},
                                        {"partition_dev", partition_deviation(model)}};
            if (has_val) {
                const auto val = evaluate(model, corpus, Split::val, cfg.eval_batch);
                line["val_acc"] = val.whole.acc;
                line["val_auc"] =
                    val.whole.auc ? nlohmann::ordered_json(*val.whole.auc) : nlohmann::ordered_json(nullptr);
            }
            detail::write_log(hooks.log, line);
            window = {};
            window_steps = 0;
        }
    }
    return {Phase::adat, adad.step + cfg.adat_iters, rc, snapshot(model), moments_to_tensors(params, moments)};
}

// ---------------------------------------------------------------------------
// Ablation grids

struct AblationRow {
    std::string label;
    RunConfig config;
};

/// Decomposition settings: mask type / initialisation / optimisation.
inline std::vector<AblationRow> tab3_grid(const RunConfig& base) {
    struct Setting {
        const char* label;
        MaskMode mode;
        MaskInit init;
        bool triplet;
    };
    const Setting settings[] = {
        {"Hard/Binary/--", MaskMode::hard, MaskInit::binary, false},
        {"Soft/Average/--", MaskMode::soft_free, MaskInit::average, false},
        {"Soft/Average/Triplet", MaskMode::soft_free, MaskInit::average, true},
        {"Soft/Average/Softmax+Triplet", MaskMode::soft_softmax, MaskInit::average, true},
        {"Soft/Binary/--", MaskMode::soft_free, MaskInit::binary, false},
        {"Soft/Binary/Triplet", MaskMode::soft_free, MaskInit::binary, true},
        {"Soft/Binary/Softmax+Triplet", MaskMode::soft_softmax, MaskInit::binary, true},
    };
    std::vector<AblationRow> rows;
    for (const auto& s : settings) {
        RunConfig rc = base;
        rc.train.model.frequency_branch = true;
        rc.train.model.mask_mode = s.mode;
        rc.train.model.mask_init = s.init;
        rc.train.model.fusion = FusionScheme::attention;
        rc.train.gamma = s.triplet ? base.train.gamma : 0.0;
        rows.push_back({s.label, rc});
    }
    return rows;
}

/// Fusion settings with the full soft/binary/softmax+triplet decomposition.
inline std::vector<AblationRow> tab4_grid(const RunConfig& base) {
    const std::pair<const char*, FusionScheme> settings[] = {
        {"All At Entry", FusionScheme::all_entry},
        {"All At Exit", FusionScheme::all_exit},
        {"Predefined", FusionScheme::predefined},
        {"Attention-based", FusionScheme::attention},
    };
    std::vector<AblationRow> rows;
    for (const auto& [label, scheme] : settings) {
        RunConfig rc = base;
        rc.train.model.frequency_branch = true;
        rc.train.model.mask_mode = MaskMode::soft_softmax;
        rc.train.model.mask_init = MaskInit::binary;
        rc.train.model.fusion = scheme;
        rows.push_back({label, rc});
    }
    return rows;
}

}  // namespace afd
