#pragma once

// Two-branch detector: a spatial CNN whose entrance-layer activations receive
// re-weighted features from a shared frequency extractor run on every band.

#include "afd/freq_decomp.hpp"
#include "afd/rng.hpp"
#include "afd/spectral.hpp"
#include "afd/tensor.hpp"

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace afd {

enum class FusionScheme { attention, all_entry, all_exit, predefined };

inline const char* to_string(FusionScheme s) {
    switch (s) {
        case FusionScheme::attention: return "attention";
        case FusionScheme::all_entry: return "all_entry";
        case FusionScheme::all_exit: return "all_exit";
        case FusionScheme::predefined: return "predefined";
    }
    return "?";
}

inline FusionScheme parse_fusion_scheme(const std::string& s) {
    if (s == "attention") return FusionScheme::attention;
    if (s == "all_entry") return FusionScheme::all_entry;
    if (s == "all_exit") return FusionScheme::all_exit;
    if (s == "predefined") return FusionScheme::predefined;
    throw std::invalid_argument("unknown fusion scheme '" + s + "'");
}

struct ModelConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t channels = 3;
    std::vector<std::size_t> block_channels{16, 32, 64, 64};
    std::size_t layer_count = 3;
    bool frequency_branch = true;
    std::size_t n_masks = 3;
    MaskMode mask_mode = MaskMode::soft_softmax;
    MaskInit mask_init = MaskInit::binary;
    std::optional<BandThresholds> thresholds;  // defaults to scaled_thresholds(H, W)
    double sharpness = 8.0;
    FusionScheme fusion = FusionScheme::attention;
    bool conv_bias = true;
    // Inputs are standardised per image: channel means removed, then scaled.
    bool center_inputs = true;
    double input_scale = 10.0;
    // Each band is rescaled to unit RMS per image before the extractor, so
    // faint high bands are not drowned out by the low band.
    bool band_norm = true;
    double band_norm_eps = 0.01;

    std::optional<double> band_norm_option() const { return band_norm ? std::optional(band_norm_eps) : std::nullopt; }
    BandThresholds resolved_thresholds() const { return thresholds.value_or(scaled_thresholds(height, width)); }

    void validate() const {
        if (height == 0 || width == 0 || channels == 0) throw std::invalid_argument("model: image dims must be positive");
        if (block_channels.empty()) throw std::invalid_argument("model: need at least one block");
        if (layer_count == 0 || layer_count > block_channels.size())
            throw std::invalid_argument("model: layer_count must lie in [1, blocks]");
        if (!(input_scale > 0.0) || !std::isfinite(input_scale))
            throw std::invalid_argument("model: input_scale must be finite and positive");
        if (!(band_norm_eps > 0.0) || !std::isfinite(band_norm_eps))
            throw std::invalid_argument("model: band_norm_eps must be finite and positive");
    }
};

/// Removes each image's per-channel mean (optional) and multiplies by `scale`.
/// Without the centring, a 3x3 kernel sees the image's base colour far more
/// strongly than a faint high-frequency artifact.
inline Tensor standardize(const Tensor& images, bool center, double scale) {
    detail::require(images.rank() == 4, "standardize: expected [B,C,H,W], got " + to_string(images.shape()));
    const std::size_t planes = images.dim(0) * images.dim(1), plane = images.dim(2) * images.dim(3);
    const auto& src = images.values();
    std::vector<double> out(src.size());
    for (std::size_t p = 0; p < planes; ++p) {
        const auto first = src.begin() + static_cast<std::ptrdiff_t>(p * plane);
        const double m = center ? std::accumulate(first, first + static_cast<std::ptrdiff_t>(plane), 0.0) / plane : 0.0;
        for (std::size_t k = 0; k < plane; ++k) out[p * plane + k] = (src[p * plane + k] - m) * scale;
    }
    return Tensor(images.shape(), std::move(out));
}

/// 3x3 stride-2 convolution followed by ReLU.
struct ConvBlock {
    Tensor weight;
    Tensor bias;

    Tensor forward(const Tensor& x) const { return relu(conv2d(x, weight, bias, 2, 1)); }
};

namespace detail {

inline ConvBlock make_block(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
    std::vector<double> w(out * in * 9);
    for (auto& v : w) v = stddev * rng.normal();
    ConvBlock block{Tensor({out, in, 3, 3}, std::move(w), true), Tensor()};
    if (with_bias) block.bias = Tensor::zeros({out}, true);
    return block;
}

}  // namespace detail

/// Spatial CNN: conv blocks, then global pooling and a linear classifier.
struct Backbone {
    std::vector<ConvBlock> blocks;
    std::size_t layer_count = 3;
    Tensor head_weight;  // [C_last, 1]
    Tensor head_bias;    // [1]

    struct Output {
        std::vector<Tensor> entrance;  // block outputs 1..layer_count
        Tensor logits;                 // [B, 1], pre-sigmoid
    };

    Tensor classify(const Tensor& features) const {
        return add(matmul(global_avg_pool(features), head_weight), head_bias);
    }
};

/// Mirrors the backbone's first layer_count blocks with its own weights;
/// one instance is shared by all bands.
struct FreqExtractor {
    std::vector<ConvBlock> blocks;

    std::vector<Tensor> forward(const Tensor& band) const {
        std::vector<Tensor> depth;
        Tensor x = band;
        for (const auto& b : blocks) {
            x = b.forward(x);
            depth.push_back(x);
        }
        return depth;
    }
};

struct FreqBranchOutput {
    std::vector<std::vector<Tensor>> features;  // [band][depth]
    std::vector<Tensor> embeddings;             // [band] -> [B, C_depth]
};

inline Backbone::Output backbone_forward(const Backbone& net, const Tensor& images) {
    Backbone::Output out;
    Tensor x = images;
    for (std::size_t j = 0; j < net.blocks.size(); ++j) {
        x = net.blocks[j].forward(x);
        if (j < net.layer_count) out.entrance.push_back(x);
    }
    out.logits = net.classify(x);
    return out;
}

inline FreqBranchOutput freq_branch(const FreqExtractor& extractor, const Tensor& images, const MaskBank& bank,
                                    const SpectralPair& pair, std::optional<double> band_norm_eps = std::nullopt) {
    const auto spectrum = dct2(images, pair);
    const auto bands = decompose(spectrum, masks_from_logits(bank), pair);
    FreqBranchOutput out;
    for (const auto& band : bands) {
        out.features.push_back(extractor.forward(band_norm_eps ? rms_normalize(band, *band_norm_eps) : band));
        out.embeddings.push_back(global_avg_pool(out.features.back().back()));
    }
    return out;
}

/// Band-to-layer weights [n, L]. Attention is softmax over layers; the fixed
/// schemes are 0/1 routings.
inline Tensor routing_matrix(FusionScheme scheme, std::size_t bands, std::size_t layers, const Tensor& att_logits) {
    if (scheme == FusionScheme::attention) {
        detail::require(att_logits.defined() && att_logits.shape() == Shape{bands, layers},
                        "attention logits must be [" + std::to_string(bands) + "," + std::to_string(layers) + "]");
        return softmax(att_logits, 1);
    }
    std::vector<double> r(bands * layers, 0.0);
    for (std::size_t i = 0; i < bands; ++i) {
        std::size_t layer = 0;
        switch (scheme) {
            case FusionScheme::all_entry: layer = 0; break;
            case FusionScheme::all_exit: layer = layers - 1; break;
            case FusionScheme::predefined:
                layer = bands == 1 ? 0 : (i * (layers - 1) * 2 + (bands - 1)) / (2 * (bands - 1));
                break;
            case FusionScheme::attention: break;
        }
        r[i * layers + layer] = 1.0;
    }
    return Tensor({bands, layers}, std::move(r));
}

/// rgb + sum_i routing[i, layer] * freq[i] at a single entrance layer.
inline Tensor fuse_layer(const Tensor& rgb, const std::vector<Tensor>& freq_at_layer, const Tensor& routing,
                         std::size_t layer) {
    const std::size_t layers = routing.dim(1);
    Tensor fused = rgb;
    for (std::size_t i = 0; i < freq_at_layer.size(); ++i) {
        detail::require(freq_at_layer[i].shape() == rgb.shape(), "fusion: frequency feature " +
                                                                     to_string(freq_at_layer[i].shape()) +
                                                                     " vs spatial " + to_string(rgb.shape()));
        const std::size_t idx = i * layers + layer;
        if (!routing.requires_grad() && routing.at(idx) == 0.0) continue;
        fused = add(fused, scale_by(freq_at_layer[i], routing, idx));
    }
    return fused;
}

namespace detail {

inline std::vector<Tensor> fuse_all(const std::vector<Tensor>& rgb, const std::vector<std::vector<Tensor>>& freq,
                                    const Tensor& routing) {
    require(routing.dim(0) == freq.size() && routing.dim(1) == rgb.size(),
            "fusion: routing " + to_string(routing.shape()) + " vs " + std::to_string(freq.size()) + " bands x " +
                std::to_string(rgb.size()) + " layers");
    std::vector<Tensor> fused;
    for (std::size_t j = 0; j < rgb.size(); ++j) {
        std::vector<Tensor> at_layer;
        for (const auto& band : freq) {
            require(band.size() >= rgb.size(), "fusion: frequency branch shallower than entrance layers");
            at_layer.push_back(band[j]);
        }
        fused.push_back(fuse_layer(rgb[j], at_layer, routing, j));
    }
    return fused;
}

}  // namespace detail

/// fused_j = rgb_j + sum_i Att[i, j] freq_{i, j} with Att = softmax over layers of att_logits [n, L].
inline std::vector<Tensor> attention_fuse(const std::vector<Tensor>& rgb, const std::vector<std::vector<Tensor>>& freq,
                                          const Tensor& att_logits) {
    return detail::fuse_all(rgb, freq, routing_matrix(FusionScheme::attention, freq.size(), rgb.size(), att_logits));
}

inline std::vector<Tensor> fuse_fixed(const std::vector<Tensor>& rgb, const std::vector<std::vector<Tensor>>& freq,
                                      FusionScheme scheme, const Tensor& att_logits = Tensor()) {
    if (scheme == FusionScheme::attention) return attention_fuse(rgb, freq, att_logits);
    return detail::fuse_all(rgb, freq, routing_matrix(scheme, freq.size(), rgb.size(), att_logits));
}

/// gamma * triplet + mean binary cross-entropy of sigmoid(logits) vs labels.
inline Tensor total_loss(const Tensor& logits, std::span<const double> labels, const Tensor& triplet, double gamma) {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw NumericError("total_loss: gamma must be finite and >= 0");
    for (double y : labels)
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("total_loss: labels must be 0 or 1");
    auto ce = bce_with_logits(logits, labels);
    if (!triplet.defined() || gamma == 0.0) return ce;
    if (!std::isfinite(triplet.item())) throw NumericError("total_loss: non-finite triplet loss");
    return add(ce, mul_scalar(triplet, gamma));
}

class TwoBranchModel {
public:
    struct Output {
        Tensor logits;                   // [B, 1]
        std::vector<Tensor> embeddings;  // per band, empty for spatial-only
    };

    TwoBranchModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        Rng rng(seed);
        std::size_t in = config_.channels;
        backbone_.layer_count = config_.layer_count;
        for (std::size_t c : config_.block_channels) {
            backbone_.blocks.push_back(detail::make_block(in, c, config_.conv_bias, rng));
            in = c;
        }
        std::vector<double> head(in);
        for (auto& v : head) v = rng.normal() / std::sqrt(static_cast<double>(in));
        backbone_.head_weight = Tensor({in, 1}, std::move(head), true);
        backbone_.head_bias = Tensor::zeros({1}, true);

        if (config_.frequency_branch) {
            in = config_.channels;
            for (std::size_t j = 0; j < config_.layer_count; ++j) {
                extractor_.blocks.push_back(detail::make_block(in, config_.block_channels[j], config_.conv_bias, rng));
                in = config_.block_channels[j];
            }
            masks_ = init_mask_logits(config_.mask_mode, config_.mask_init, config_.n_masks, config_.height,
                                      config_.width, config_.resolved_thresholds(), config_.sharpness);
            att_logits_ = Tensor::zeros({config_.n_masks, config_.layer_count}, config_.fusion == FusionScheme::attention);
            spectral_ = fixed_dct(config_.height, config_.width);
        }
    }

    const ModelConfig& config() const { return config_; }
    const Backbone& backbone() const { return backbone_; }
    const FreqExtractor& extractor() const { return extractor_; }
    const MaskBank& mask_bank() const { return masks_; }
    const Tensor& attention_logits() const { return att_logits_; }
    const SpectralPair& spectral() const { return spectral_; }
    bool has_frequency_branch() const { return config_.frequency_branch; }

    /// Band-to-layer routing weights currently in effect.
    Tensor routing() const {
        NoGradGuard no_grad;
        return routing_matrix(config_.fusion, config_.n_masks, config_.layer_count, att_logits_);
    }

    /// Swaps the fixed DCT pair for learnable transform layers initialised from it.
    void enable_adat() {
        if (!config_.frequency_branch) throw std::logic_error("enable_adat: model has no frequency branch");
        if (!spectral_.learnable) spectral_ = adat_init(config_.height, config_.width);
    }
    bool adat_enabled() const { return spectral_.learnable; }

    Tensor preprocess(const Tensor& images) const {
        return standardize(images, config_.center_inputs, config_.input_scale);
    }

    Output forward(const Tensor& images) const {
        detail::require(images.rank() == 4 && images.dim(1) == config_.channels && images.dim(2) == config_.height &&
                            images.dim(3) == config_.width,
                        "model input " + to_string(images.shape()) + " does not match [B," +
                            std::to_string(config_.channels) + "," + std::to_string(config_.height) + "," +
                            std::to_string(config_.width) + "]");
        const auto input = preprocess(images);
        if (!config_.frequency_branch) return {backbone_forward(backbone_, input).logits, {}};

        auto freq = freq_branch(extractor_, input, masks_, spectral_, config_.band_norm_option());
        auto route = routing_matrix(config_.fusion, config_.n_masks, config_.layer_count, att_logits_);
        Tensor x = input;
        for (std::size_t j = 0; j < backbone_.blocks.size(); ++j) {
            x = backbone_.blocks[j].forward(x);
            if (j < config_.layer_count) {
                std::vector<Tensor> at_layer;
                for (const auto& band : freq.features) at_layer.push_back(band[j]);
                x = fuse_layer(x, at_layer, route, j);
            }
        }
        return {backbone_.classify(x), std::move(freq.embeddings)};
    }

    /// Every persistent tensor, trainable or not, under a stable name.
    std::vector<NamedTensor> named_tensors() const {
        std::vector<NamedTensor> out;
        auto add_blocks = [&](const std::string& prefix, const std::vector<ConvBlock>& blocks) {
            for (std::size_t j = 0; j < blocks.size(); ++j) {
                out.push_back({prefix + ".block" + std::to_string(j) + ".weight", blocks[j].weight});
                if (blocks[j].bias.defined()) out.push_back({prefix + ".block" + std::to_string(j) + ".bias", blocks[j].bias});
            }
        };
        add_blocks("backbone", backbone_.blocks);
        out.push_back({"head.weight", backbone_.head_weight});
        out.push_back({"head.bias", backbone_.head_bias});
        if (config_.frequency_branch) {
            add_blocks("freq", extractor_.blocks);
            out.push_back({"masks.logits", masks_.logits});
            out.push_back({"attention.logits", att_logits_});
            if (spectral_.learnable) {
                out.push_back({"adat.fwd_row", spectral_.fwd_row});
                out.push_back({"adat.fwd_col", spectral_.fwd_col});
                out.push_back({"adat.inv_row", spectral_.inv_row});
                out.push_back({"adat.inv_col", spectral_.inv_col});
            }
        }
        return out;
    }

    std::vector<NamedTensor> named_parameters() const {
        auto all = named_tensors();
        std::erase_if(all, [](const NamedTensor& t) { return !t.tensor.requires_grad(); });
        return all;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& p : named_parameters()) out.push_back(p.tensor);
        return out;
    }

    void zero_grad() {
        for (auto& p : named_tensors()) p.tensor.zero_grad();
    }

private:
    ModelConfig config_;
    Backbone backbone_;
    FreqExtractor extractor_;
    MaskBank masks_;
    Tensor att_logits_;
    SpectralPair spectral_;
};

}  // namespace afd
