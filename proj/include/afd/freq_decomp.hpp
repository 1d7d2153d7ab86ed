#pragma once

// Soft-mask frequency decomposition: a bank of n masks over the DCT grid,
// the band images they select, and the triplet heterogeneity loss that keeps
// per-band features apart.

#include "afd/spectral.hpp"
#include "afd/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace afd {

enum class MaskMode { hard, soft_free, soft_softmax };
enum class MaskInit { binary, average };

inline const char* to_string(MaskMode m) {
    switch (m) {
        case MaskMode::hard: return "hard";
        case MaskMode::soft_free: return "soft_free";
        case MaskMode::soft_softmax: return "soft_softmax";
    }
    return "?";
}

inline const char* to_string(MaskInit m) { return m == MaskInit::binary ? "binary" : "average"; }

inline MaskMode parse_mask_mode(const std::string& s) {
    if (s == "hard") return MaskMode::hard;
    if (s == "soft_free") return MaskMode::soft_free;
    if (s == "soft_softmax") return MaskMode::soft_softmax;
    throw std::invalid_argument("unknown mask mode '" + s + "'");
}

inline MaskInit parse_mask_init(const std::string& s) {
    if (s == "binary") return MaskInit::binary;
    if (s == "average") return MaskInit::average;
    throw std::invalid_argument("unknown mask init '" + s + "'");
}

/// Boundaries on the anti-diagonal index u + v: low < first <= mid < second <= high.
struct BandThresholds {
    std::size_t first = 32;
    std::size_t second = 64;
    bool operator==(const BandThresholds&) const = default;
};

/// The 32/64 split rescaled to an H x W grid by (H + W - 2) / 298, which puts
/// the 64x64 default at 14/27.
inline BandThresholds scaled_thresholds(std::size_t height, std::size_t width) {
    const double scale = static_cast<double>(height + width - 2) / 298.0;
    return {static_cast<std::size_t>(std::lround(32.0 * scale)), static_cast<std::size_t>(std::lround(64.0 * scale))};
}

/// Band index owning anti-diagonal `diag` for n bands. With n = 3 this is the
/// low/mid/high split; for n > 3 the middle range is divided evenly.
inline std::size_t band_of(std::size_t diag, std::size_t n, BandThresholds t) {
    if (diag < t.first) return 0;
    if (n == 2) return 1;
    if (diag >= t.second) return n - 1;
    const std::size_t middle = n - 2;
    return 1 + (diag - t.first) * middle / (t.second - t.first);
}

struct MaskBank {
    std::size_t n = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    MaskMode mode = MaskMode::soft_softmax;
    MaskInit init = MaskInit::binary;
    BandThresholds thresholds;
    double sharpness = 8.0;
    Tensor logits;  // [n, H, W]; trainable unless mode == hard

    std::vector<Tensor> parameters() const {
        if (mode == MaskMode::hard) return {};
        return {logits};
    }
};

inline MaskBank init_mask_logits(MaskMode mode, MaskInit init, std::size_t n, std::size_t height, std::size_t width,
                                 BandThresholds thresholds, double sharpness = 8.0) {
    if (n < 2) throw std::invalid_argument("init_mask_logits: need at least 2 masks, got " + std::to_string(n));
    if (height == 0 || width == 0) throw std::invalid_argument("init_mask_logits: grid must be non-empty");
    if (!(thresholds.first > 0 && thresholds.first < thresholds.second && thresholds.second < height + width - 1))
        throw std::invalid_argument("init_mask_logits: thresholds " + std::to_string(thresholds.first) + "/" +
                                    std::to_string(thresholds.second) + " must satisfy 0 < t1 < t2 < H+W-1");
    if (mode == MaskMode::hard && init != MaskInit::binary)
        throw std::invalid_argument("init_mask_logits: hard masks require binary initialisation");
    if (init == MaskInit::binary && !(sharpness > 0.0))
        throw std::invalid_argument("init_mask_logits: sharpness must be positive");

    std::vector<double> logits(n * height * width, 0.0);
    if (init == MaskInit::binary) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t u = 0; u < height; ++u)
                for (std::size_t v = 0; v < width; ++v) {
                    const bool inside = band_of(u + v, n, thresholds) == i;
                    double value = inside ? sharpness : -sharpness;
                    if (mode == MaskMode::hard) value = inside ? 1.0 : 0.0;
                    logits[(i * height + u) * width + v] = value;
                }
    }
    MaskBank bank{n, height, width, mode, init, thresholds, sharpness, Tensor()};
    bank.logits = Tensor({n, height, width}, std::move(logits), mode != MaskMode::hard);
    return bank;
}

/// Masks [n, H, W]: softmax across masks (soft_softmax), elementwise sigmoid
/// (soft_free), or the stored 0/1 partition (hard).
inline Tensor masks_from_logits(const MaskBank& bank) {
    switch (bank.mode) {
        case MaskMode::soft_softmax: return softmax(bank.logits, 0);
        case MaskMode::soft_free: return sigmoid(bank.logits);
        case MaskMode::hard: return bank.logits;
    }
    throw std::logic_error("unreachable mask mode");
}

/// band_i = inverse(S * M_i) for a spectrum [B, C, H, W]; masks broadcast over batch and channels.
inline std::vector<Tensor> decompose(const Tensor& spectrum, const Tensor& masks, const SpectralPair& pair) {
    detail::require(masks.rank() == 3, "decompose: masks must be [n,H,W], got " + to_string(masks.shape()));
    detail::require(spectrum.rank() >= 2 && spectrum.dim(spectrum.rank() - 2) == masks.dim(1) &&
                        spectrum.dim(spectrum.rank() - 1) == masks.dim(2),
                    "decompose: spectrum " + to_string(spectrum.shape()) + " vs masks " + to_string(masks.shape()));
    std::vector<Tensor> bands;
    bands.reserve(masks.dim(0));
    for (std::size_t i = 0; i < masks.dim(0); ++i) bands.push_back(idct2(mul(spectrum, slice(masks, i)), pair));
    return bands;
}

inline std::vector<Tensor> decompose(const Tensor& spectrum, const Tensor& masks) {
    return decompose(spectrum, masks,
                     detail::cached_dct(spectrum.dim(spectrum.rank() - 2), spectrum.dim(spectrum.rank() - 1)));
}

/// Hinge over every ordered (anchor, negative) mask pair with the positive
/// taken as the anchor itself:
///   mean over images and pairs of max(m - ||f_a - f_n||^2, 0).
/// Each embedding is [B, D].
inline Tensor triplet_loss(const std::vector<Tensor>& embeddings, double margin) {
    if (embeddings.size() < 2) throw std::invalid_argument("triplet_loss: need at least 2 embeddings per image");
    if (!(margin > 0.0)) throw std::invalid_argument("triplet_loss: margin must be positive");
    const Shape& shape = embeddings.front().shape();
    for (const auto& e : embeddings)
        detail::require(e.rank() == 2 && e.shape() == shape,
                        "triplet_loss: embeddings must share a [B,D] shape, got " + to_string(e.shape()));
    const std::size_t n = embeddings.size();
    std::vector<Tensor> hinges;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t neg = 0; neg < n; ++neg) {
            if (a == neg) continue;
            auto diff = sub(embeddings[a], embeddings[neg]);
            auto dist = sum(mul(diff, diff), 1);
            hinges.push_back(relu(add_scalar(mul_scalar(dist, -1.0), margin)));
        }
    return mean_all(hinges);
}

// ---------------------------------------------------------------------------
// Mask export

struct GrayImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

inline void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string magic;
    int maxval = 0;
    GrayImage image;
    in >> magic >> image.width >> image.height >> maxval;
    if (magic != "P5" || maxval != 255 || !in) throw IoError(path.string() + ": not an 8-bit binary PGM");
    in.get();
    image.pixels.resize(image.width * image.height);
    in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!in) throw IoError(path.string() + ": truncated pixel data");
    return image;
}

/// Writes mask_<i>.pgm for every mask, mapping [0, 1] linearly onto [0, 255].
inline std::vector<std::filesystem::path> export_masks(const MaskBank& bank, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    NoGradGuard no_grad;
    const auto masks = masks_from_logits(bank);
    std::vector<std::filesystem::path> written;
    const std::size_t plane = bank.height * bank.width;
    for (std::size_t i = 0; i < bank.n; ++i) {
        GrayImage img{bank.width, bank.height, std::vector<std::uint8_t>(plane)};
        for (std::size_t k = 0; k < plane; ++k) {
            const double v = std::clamp(masks.at(i * plane + k), 0.0, 1.0);
            img.pixels[k] = static_cast<std::uint8_t>(std::lround(255.0 * v));
        }
        auto path = dir / ("mask_" + std::to_string(i) + ".pgm");
        write_pgm(path, img);
        written.push_back(path);
    }
    return written;
}

}  // namespace afd
