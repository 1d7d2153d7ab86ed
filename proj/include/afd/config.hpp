#pragma once

// Run configuration with flat dotted-key JSON (de)serialisation.

#include "afd/model.hpp"
#include "afd/synth.hpp"

#include <json.hpp>

#include <string>

namespace afd {

struct TrainConfig {
    double lr0 = 0.001;
    std::size_t batch = 16;
    std::size_t adad_epochs = 15;
    std::size_t adat_iters = 500;
    std::size_t adat_eval_interval = 100;
    double adat_lr_scale = 0.1;
    double gamma = 1.0;
    double margin = 0.1;
    std::uint64_t seed = 0;
    bool unfreeze_all = true;
    bool select_best = true;
    std::size_t eval_batch = 32;
    ModelConfig model;

    void validate() const {
        model.validate();
        if (!(lr0 > 0.0) || batch == 0 || adad_epochs == 0 || adat_iters == 0 || adat_eval_interval == 0 ||
            !(adat_lr_scale > 0.0) || !(margin > 0.0) || !(gamma >= 0.0) || eval_batch == 0)
            throw std::invalid_argument("train config: rates, counts and margin must be positive, gamma >= 0");
    }
};

/// Everything a CLI invocation can configure.
struct RunConfig {
    SynthConfig data;
    TrainConfig train;
};

using FlatJson = nlohmann::ordered_json;

inline FlatJson to_flat_json(const RunConfig& rc) {
    const auto& m = rc.train.model;
    const auto& t = rc.train;
    const auto& d = rc.data;
    FlatJson j;
    j["data.seed"] = d.seed;
    j["data.count"] = d.count;
    j["data.size"] = d.size;
    j["data.channels"] = d.channels;
    j["data.domains"] = d.domains;
    j["data.checker_amplitude"] = d.checker_amplitude;
    j["data.quant_step"] = d.quant_step;
    j["model.height"] = m.height;
    j["model.width"] = m.width;
    j["model.channels"] = m.channels;
    j["model.block_channels"] = m.block_channels;
    j["model.layer_count"] = m.layer_count;
    j["model.frequency_branch"] = m.frequency_branch;
    j["model.n_masks"] = m.n_masks;
    j["model.mask_mode"] = to_string(m.mask_mode);
    j["model.mask_init"] = to_string(m.mask_init);
    j["model.threshold_low"] = m.thresholds ? m.thresholds->first : 0;
    j["model.threshold_high"] = m.thresholds ? m.thresholds->second : 0;
    j["model.sharpness"] = m.sharpness;
    j["model.fusion"] = to_string(m.fusion);
    j["model.conv_bias"] = m.conv_bias;
    j["model.center_inputs"] = m.center_inputs;
    j["model.input_scale"] = m.input_scale;
    j["model.band_norm"] = m.band_norm;
    j["model.band_norm_eps"] = m.band_norm_eps;
    j["train.lr0"] = t.lr0;
    j["train.batch"] = t.batch;
    j["train.adad_epochs"] = t.adad_epochs;
    j["train.adat_iters"] = t.adat_iters;
    j["train.adat_eval_interval"] = t.adat_eval_interval;
    j["train.adat_lr_scale"] = t.adat_lr_scale;
    j["train.gamma"] = t.gamma;
    j["train.margin"] = t.margin;
    j["train.seed"] = t.seed;
    j["train.unfreeze_all"] = t.unfreeze_all;
    j["train.select_best"] = t.select_best;
    j["train.eval_batch"] = t.eval_batch;
    return j;
}

/// Applies flat dotted keys onto `rc`. Unknown keys and ill-typed values are
/// rejected with std::invalid_argument.
inline void apply_flat_json(RunConfig& rc, const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object of dotted keys");
    auto& m = rc.train.model;
    auto& t = rc.train;
    auto& d = rc.data;
    std::size_t low = m.thresholds ? m.thresholds->first : 0, high = m.thresholds ? m.thresholds->second : 0;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "data.seed") d.seed = value.get<std::uint64_t>();
            else if (key == "data.count") d.count = value.get<std::size_t>();
            else if (key == "data.size") d.size = value.get<std::size_t>();
            else if (key == "data.channels") d.channels = value.get<std::size_t>();
            else if (key == "data.domains") d.domains = value.get<std::size_t>();
            else if (key == "data.checker_amplitude") d.checker_amplitude = value.get<double>();
            else if (key == "data.quant_step") d.quant_step = value.get<double>();
            else if (key == "model.height") m.height = value.get<std::size_t>();
            else if (key == "model.width") m.width = value.get<std::size_t>();
            else if (key == "model.channels") m.channels = value.get<std::size_t>();
            else if (key == "model.block_channels") m.block_channels = value.get<std::vector<std::size_t>>();
            else if (key == "model.layer_count") m.layer_count = value.get<std::size_t>();
            else if (key == "model.frequency_branch") m.frequency_branch = value.get<bool>();
            else if (key == "model.n_masks") m.n_masks = value.get<std::size_t>();
            else if (key == "model.mask_mode") m.mask_mode = parse_mask_mode(value.get<std::string>());
            else if (key == "model.mask_init") m.mask_init = parse_mask_init(value.get<std::string>());
            else if (key == "model.threshold_low") low = value.get<std::size_t>();
            else if (key == "model.threshold_high") high = value.get<std::size_t>();
            else if (key == "model.sharpness") m.sharpness = value.get<double>();
            else if (key == "model.fusion") m.fusion = parse_fusion_scheme(value.get<std::string>());
            else if (key == "model.conv_bias") m.conv_bias = value.get<bool>();
            else if (key == "model.center_inputs") m.center_inputs = value.get<bool>();
            else if (key == "model.input_scale") m.input_scale = value.get<double>();
            else if (key == "model.band_norm") m.band_norm = value.get<bool>();
            else if (key == "model.band_norm_eps") m.band_norm_eps = value.get<double>();
            else if (key == "train.lr0") t.lr0 = value.get<double>();
            else if (key == "train.batch") t.batch = value.get<std::size_t>();
            else if (key == "train.adad_epochs") t.adad_epochs = value.get<std::size_t>();
            else if (key == "train.adat_iters") t.adat_iters = value.get<std::size_t>();
            else if (key == "train.adat_eval_interval") t.adat_eval_interval = value.get<std::size_t>();
            else if (key == "train.adat_lr_scale") t.adat_lr_scale = value.get<double>();
            else if (key == "train.gamma") t.gamma = value.get<double>();
            else if (key == "train.margin") t.margin = value.get<double>();
            else if (key == "train.seed") t.seed = value.get<std::uint64_t>();
            else if (key == "train.unfreeze_all") t.unfreeze_all = value.get<bool>();
            else if (key == "train.select_best") t.select_best = value.get<bool>();
            else if (key == "train.eval_batch") t.eval_batch = value.get<std::size_t>();
            else throw std::invalid_argument("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("config key '" + key + "': " + e.what());
        }
    }
    if (low == 0 && high == 0)
        m.thresholds.reset();
    else
        m.thresholds = BandThresholds{low, high};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc;
    apply_flat_json(rc, j);
    return rc;
}

}  // namespace afd
