#pragma once

// Deterministic synthetic forgery corpus: smooth pristine textures and three
// manipulation families with distinct spectral signatures.

#include "afd/binary_io.hpp"
#include "afd/rng.hpp"
#include "afd/spectral.hpp"
#include "afd/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

namespace afd {

/// Planar C x H x W image with values in [0, 1].
struct Image {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> pixels;

    float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

enum class Split { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

struct Sample {
    Image image;
    int label = 0;        // 0 pristine, 1 forged
    int domain = -1;      // manipulation family for forged images, -1 for pristine
    std::size_t source = 0;  // index of the pristine sample this image derives from
    Split split = Split::train;
    bool operator==(const Sample&) const = default;
};

struct Corpus {
    std::size_t channels = 3, height = 64, width = 64;
    std::size_t domains = 3;
    std::uint64_t seed = 0;
    std::vector<Sample> samples;
    bool operator==(const Corpus&) const = default;

    std::vector<std::size_t> indices(Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == split) out.push_back(i);
        return out;
    }
};

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t count = 600;  // pristine sources
    std::size_t size = 64;
    std::size_t channels = 3;
    std::size_t domains = 3;
    double checker_amplitude = 0.02;
    double quant_step = 0.04;
};

namespace detail {

inline float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

inline std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    if (m == 1) return 0;
    while (i < 0 || i >= m) i = i < 0 ? -i - 1 : 2 * m - i - 1;
    return static_cast<std::size_t>(i);
}

/// Separable 1D filter applied along rows then columns with reflected borders.
inline std::vector<double> separable_filter(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                            const std::vector<double>& taps) {
    const auto radius = static_cast<std::ptrdiff_t>(taps.size() / 2);
    std::vector<double> tmp(plane.size()), out(plane.size());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k)
                acc += taps[static_cast<std::size_t>(k + radius)] * plane[y * w + reflect(static_cast<std::ptrdiff_t>(x) + k, w)];
            tmp[y * w + x] = acc;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k)
                acc += taps[static_cast<std::size_t>(k + radius)] * tmp[reflect(static_cast<std::ptrdiff_t>(y) + k, h) * w + x];
            out[y * w + x] = acc;
        }
    return out;
}

inline std::vector<double> gaussian_taps(double sigma) {
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> taps;
    double total = 0.0;
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        taps.push_back(std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma)));
        total += taps.back();
    }
    for (auto& t : taps) t /= total;
    return taps;
}

inline std::vector<double> box_taps(std::size_t size) { return std::vector<double>(size, 1.0 / static_cast<double>(size)); }

struct Region {
    std::size_t y0, x0, y1, x1;  // half-open
    bool contains(std::size_t y, std::size_t x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

inline Region random_region(Rng& rng, std::size_t h, std::size_t w) {
    const std::size_t rh = std::max<std::size_t>(1, h / 4 + rng.index(h / 4 + 1));
    const std::size_t rw = std::max<std::size_t>(1, w / 4 + rng.index(w / 4 + 1));
    const std::size_t y0 = rng.index(h - rh + 1), x0 = rng.index(w - rw + 1);
    return {y0, x0, y0 + rh, x0 + rw};
}

}  // namespace detail

/// Pristine texture: 3-6 low-frequency cosines over a per-channel base colour
/// plus Gaussian-smoothed noise, clipped to [0, 1].
inline Image gen_real_one(std::uint64_t seed, std::size_t index, std::size_t height, std::size_t width,
                          std::size_t channels = 3) {
    Rng rng(mix_seed(seed, index, 0x5245414cULL));
    Image img{channels, height, width, std::vector<float>(channels * height * width)};
    std::vector<std::vector<double>> planes(channels, std::vector<double>(height * width));
    for (auto& p : planes) std::fill(p.begin(), p.end(), rng.uniform(0.3, 0.7));

    const std::size_t waves = 3 + rng.index(4);
    for (std::size_t k = 0; k < waves; ++k) {
        const double fu = static_cast<double>(rng.index(5)), fv = static_cast<double>(rng.index(5));
        const double phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi), phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = rng.uniform(0.03, 0.12);
        std::vector<double> gain(channels);
        for (auto& g : gain) g = rng.uniform(0.5, 1.0);
        for (std::size_t y = 0; y < height; ++y) {
            const double cy = std::cos(std::numbers::pi * fu * (static_cast<double>(y) + 0.5) / static_cast<double>(height) + phase_y);
            for (std::size_t x = 0; x < width; ++x) {
                const double cx =
                    std::cos(std::numbers::pi * fv * (static_cast<double>(x) + 0.5) / static_cast<double>(width) + phase_x);
                for (std::size_t c = 0; c < channels; ++c) planes[c][y * width + x] += amp * gain[c] * cy * cx;
            }
        }
    }

    const double sigma = rng.uniform(0.8, 1.6);
    const double noise_amp = rng.uniform(0.04, 0.10);
    const auto taps = detail::gaussian_taps(sigma);
    for (std::size_t c = 0; c < channels; ++c) {
        std::vector<double> noise(height * width);
        for (auto& n : noise) n = rng.normal();
        noise = detail::separable_filter(noise, height, width, taps);
        for (std::size_t k = 0; k < noise.size(); ++k) planes[c][k] += noise_amp * noise[k];
    }
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t k = 0; k < height * width; ++k) img.pixels[c * height * width + k] = detail::clip01(planes[c][k]);
    return img;
}

inline std::vector<Image> gen_real(std::uint64_t seed, std::size_t count, std::size_t height, std::size_t width,
                                   std::size_t channels = 3) {
    std::vector<Image> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(gen_real_one(seed, i, height, width, channels));
    return out;
}

struct ForgeryParams {
    double checker_amplitude = 0.02;
    double quant_step = 0.04;
};

/// Manipulation families:
///   0  +/- amplitude checkerboard (period 2 px) inside a random rectangle
///   1  5x5 box blur followed by unsharp masking inside a random rectangle
///   2  uniform quantisation of mid/high DCT coefficients (u + v >= (H + W) / 8)
inline Image gen_forged(const Image& source, int domain, std::uint64_t seed, ForgeryParams params = {}) {
    if (domain < 0 || domain > 2) throw std::invalid_argument("gen_forged: unknown domain id " + std::to_string(domain));
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(domain), 0x464f524745ULL));
    const std::size_t h = source.height, w = source.width;
    Image out = source;
    switch (domain) {
        case 0: {
            const auto region = detail::random_region(rng, h, w);
            if (params.checker_amplitude == 0.0) break;
            for (std::size_t c = 0; c < source.channels; ++c)
                for (std::size_t y = region.y0; y < region.y1; ++y)
                    for (std::size_t x = region.x0; x < region.x1; ++x) {
                        const double sign = (x + y) % 2 == 0 ? 1.0 : -1.0;
                        out.at(c, y, x) = detail::clip01(source.at(c, y, x) + sign * params.checker_amplitude);
                    }
            break;
        }
        case 1: {
            const auto region = detail::random_region(rng, h, w);
            for (std::size_t c = 0; c < source.channels; ++c) {
                std::vector<double> plane(h * w);
                for (std::size_t k = 0; k < h * w; ++k) plane[k] = source.pixels[c * h * w + k];
                const auto blurred = detail::separable_filter(plane, h, w, detail::box_taps(5));
                const auto soft = detail::separable_filter(blurred, h, w, detail::box_taps(3));
                for (std::size_t y = region.y0; y < region.y1; ++y)
                    for (std::size_t x = region.x0; x < region.x1; ++x) {
                        const std::size_t k = y * w + x;
                        out.at(c, y, x) = detail::clip01(blurred[k] + 1.5 * (blurred[k] - soft[k]));
                    }
            }
            break;
        }
        case 2: {
            std::vector<double> planes(source.pixels.begin(), source.pixels.end());
            const auto spectrum = dct2(Tensor({source.channels, h, w}, std::move(planes)));
            std::vector<double> coeffs = spectrum.values();
            const std::size_t cutoff = (h + w) / 8;
            for (std::size_t c = 0; c < source.channels; ++c)
                for (std::size_t u = 0; u < h; ++u)
                    for (std::size_t v = 0; v < w; ++v) {
                        if (u + v < cutoff) continue;
                        double& k = coeffs[(c * h + u) * w + v];
                        k = params.quant_step * std::round(k / params.quant_step);
                    }
            const auto back = idct2(Tensor(spectrum.shape(), std::move(coeffs)));
            for (std::size_t k = 0; k < back.numel(); ++k) out.pixels[k] = detail::clip01(back.at(k));
            break;
        }
    }
    return out;
}

/// Sources split train/val/test as count - 2*(count/6), count/6, count/6;
/// every source is forged by every domain and shares its source's split.
inline Corpus generate_corpus(const SynthConfig& cfg) {
    if (cfg.domains > 3) throw std::invalid_argument("generate_corpus: at most 3 manipulation domains are defined");
    Corpus corpus{cfg.channels, cfg.size, cfg.size, cfg.domains, cfg.seed, {}};
    const std::size_t n_val = cfg.count / 6, n_test = cfg.count / 6, n_train = cfg.count - n_val - n_test;
    const ForgeryParams params{cfg.checker_amplitude, cfg.quant_step};
    for (std::size_t s = 0; s < cfg.count; ++s) {
        const Split split = s < n_train ? Split::train : (s < n_train + n_val ? Split::val : Split::test);
        const std::size_t source_index = corpus.samples.size();
        Sample real{gen_real_one(cfg.seed, s, cfg.size, cfg.size, cfg.channels), 0, -1, source_index, split};
        corpus.samples.push_back(real);
        for (std::size_t d = 0; d < cfg.domains; ++d) {
            auto forged = gen_forged(real.image, static_cast<int>(d), mix_seed(cfg.seed, s, 0x46414b45ULL), params);
            corpus.samples.push_back({std::move(forged), 1, static_cast<int>(d), source_index, split});
        }
    }
    return corpus;
}

/// One epoch's index list: for each domain, all of its forged images plus an
/// equal number of pristine images drawn with replacement; then shuffled.
inline std::vector<std::size_t> balance_resample(const Corpus& corpus, std::span<const std::size_t> pool,
                                                 std::uint64_t seed) {
    std::vector<std::size_t> reals;
    std::map<int, std::vector<std::size_t>> fakes;
    for (auto i : pool) {
        const auto& s = corpus.samples.at(i);
        if (s.label == 0)
            reals.push_back(i);
        else
            fakes[s.domain].push_back(i);
    }
    if (reals.empty() || fakes.empty()) throw std::invalid_argument("balance_resample: both classes must be present");
    Rng rng(mix_seed(seed, 0x42414cULL));
    std::vector<std::size_t> out;
    for (auto& [domain, list] : fakes) {
        out.insert(out.end(), list.begin(), list.end());
        for (std::size_t k = 0; k < list.size(); ++k) out.push_back(reals[rng.index(reals.size())]);
    }
    for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.index(i)]);
    return out;
}

inline std::vector<std::size_t> balance_resample(const Corpus& corpus, Split split, std::uint64_t seed) {
    const auto pool = corpus.indices(split);
    return balance_resample(corpus, pool, seed);
}

/// Stacks images into a [B, C, H, W] tensor.
inline Tensor to_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
    const std::size_t plane = corpus.channels * corpus.height * corpus.width;
    std::vector<double> data;
    data.reserve(indices.size() * plane);
    for (auto i : indices) {
        const auto& px = corpus.samples.at(i).image.pixels;
        data.insert(data.end(), px.begin(), px.end());
    }
    return Tensor({indices.size(), corpus.channels, corpus.height, corpus.width}, std::move(data));
}

// ---------------------------------------------------------------------------
// Corpus directory: manifest.json plus one AFD1 tensor file per image.

namespace detail {

inline std::string image_file_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%06zu.afd", i);
    return buf;
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
    io::Writer w;
    w.bytes("AFD1", 4);
    w.u32(3);
    w.u32(static_cast<std::uint32_t>(img.channels));
    w.u32(static_cast<std::uint32_t>(img.height));
    w.u32(static_cast<std::uint32_t>(img.width));
    w.bytes(img.pixels.data(), img.pixels.size() * sizeof(float));
    w.save(path);
}

inline Image read_image(const std::filesystem::path& path) {
    auto r = io::Reader::load(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "AFD1") throw IoError(path.string() + ": bad magic, expected AFD1");
    if (r.u32() != 3) throw IoError(path.string() + ": expected a rank-3 image");
    Image img;
    img.channels = r.u32();
    img.height = r.u32();
    img.width = r.u32();
    img.pixels.resize(img.channels * img.height * img.width);
    r.bytes(img.pixels.data(), img.pixels.size() * sizeof(float));
    if (!r.at_end()) throw IoError(path.string() + ": trailing bytes after payload");
    return img;
}

}  // namespace detail

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::ordered_json manifest;
    manifest["format"] = "afd-corpus";
    manifest["version"] = 1;
    manifest["seed"] = corpus.seed;
    manifest["channels"] = corpus.channels;
    manifest["height"] = corpus.height;
    manifest["width"] = corpus.width;
    manifest["domains"] = corpus.domains;
    manifest["count"] = corpus.samples.size();
    std::map<std::string, std::size_t> per_split;
    auto images = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        const auto& s = corpus.samples[i];
        const auto file = detail::image_file_name(i);
        detail::write_image(dir / file, s.image);
        images.push_back({{"file", file}, {"label", s.label}, {"domain", s.domain}, {"source", s.source},
                          {"split", to_string(s.split)}});
        ++per_split[to_string(s.split)];
    }
    manifest["splits"] = per_split;
    manifest["images"] = std::move(images);
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(1) << '\n';
    if (!out) throw IoError("failed writing " + (dir / "manifest.json").string());
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IoError(manifest_path.string() + ": missing corpus manifest");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path.string() + ": " + e.what());
    }
    Corpus corpus;
    try {
        if (manifest.at("format") != "afd-corpus") throw IoError(manifest_path.string() + ": not an afd corpus manifest");
        corpus.seed = manifest.at("seed").get<std::uint64_t>();
        corpus.channels = manifest.at("channels").get<std::size_t>();
        corpus.height = manifest.at("height").get<std::size_t>();
        corpus.width = manifest.at("width").get<std::size_t>();
        corpus.domains = manifest.at("domains").get<std::size_t>();
        const auto count = manifest.at("count").get<std::size_t>();
        const auto& images = manifest.at("images");
        if (images.size() != count)
            throw IoError(manifest_path.string() + ": count " + std::to_string(count) + " but " +
                          std::to_string(images.size()) + " image entries");
        std::size_t on_disk = 0;
        for (const auto& entry : std::filesystem::directory_iterator(dir))
            if (entry.path().extension() == ".afd") ++on_disk;
        if (on_disk != count)
            throw IoError(manifest_path.string() + ": count " + std::to_string(count) + " but " + std::to_string(on_disk) +
                          " image files on disk");
        for (const auto& e : images) {
            const auto file = dir / e.at("file").get<std::string>();
            if (!std::filesystem::exists(file)) throw IoError(file.string() + ": listed in manifest but missing");
            Sample s{detail::read_image(file), e.at("label").get<int>(), e.at("domain").get<int>(),
                     e.at("source").get<std::size_t>(), parse_split(e.at("split").get<std::string>())};
            if (s.image.channels != corpus.channels || s.image.height != corpus.height || s.image.width != corpus.width)
                throw IoError(file.string() + ": dimensions disagree with manifest");
            corpus.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path.string() + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw IoError(manifest_path.string() + ": " + e.what());
    }
    return corpus;
}

/// Fraction of DCT energy with u + v < cutoff, averaged over channels.
inline double low_band_energy_fraction(const Image& img, std::size_t cutoff) {
    std::vector<double> planes(img.pixels.begin(), img.pixels.end());
    const auto s = dct2(Tensor({img.channels, img.height, img.width}, std::move(planes)));
    double low = 0.0, total = 0.0;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t u = 0; u < img.height; ++u)
            for (std::size_t v = 0; v < img.width; ++v) {
                const double e = s.at((c * img.height + u) * img.width + v);
                total += e * e;
                if (u + v < cutoff) low += e * e;
            }
    return total > 0.0 ? low / total : 1.0;
}

/// Total DCT energy with lo <= u + v < hi.
inline double band_energy(const Image& img, std::size_t lo, std::size_t hi) {
    std::vector<double> planes(img.pixels.begin(), img.pixels.end());
    const auto s = dct2(Tensor({img.channels, img.height, img.width}, std::move(planes)));
    double acc = 0.0;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t u = 0; u < img.height; ++u)
            for (std::size_t v = 0; v < img.width; ++v)
                if (u + v >= lo && u + v < hi) {
                    const double e = s.at((c * img.height + u) * img.width + v);
                    acc += e * e;
                }
    return acc;
}

}  // namespace afd
