#pragma once

// Orthonormal DCT-II and learnable transform pairs initialised from it.

#include "afd/tensor.hpp"

#include <cmath>
#include <deque>
#include <numbers>

namespace afd {

struct DctBasis {
    std::size_t size = 0;
    Tensor matrix;  // [N, N], row u holds the u-th cosine
};

/// D[u, j] = c(u) cos(pi (2j + 1) u / 2N), c(0) = sqrt(1/N), c(u > 0) = sqrt(2/N).
inline DctBasis dct_matrix(std::size_t n) {
    if (n == 0) throw std::invalid_argument("dct_matrix: size must be positive");
    std::vector<double> d(n * n);
    const double nn = static_cast<double>(n);
    for (std::size_t u = 0; u < n; ++u) {
        const double c = u == 0 ? std::sqrt(1.0 / nn) : std::sqrt(2.0 / nn);
        for (std::size_t j = 0; j < n; ++j)
            d[u * n + j] = c * std::cos(std::numbers::pi * (2.0 * static_cast<double>(j) + 1.0) *
                                        static_cast<double>(u) / (2.0 * nn));
    }
    return {n, Tensor({n, n}, std::move(d))};
}

inline Tensor transpose(const Tensor& m) {
    detail::require(m.rank() == 2, "transpose expects a matrix, got " + to_string(m.shape()));
    const auto r = m.dim(0), c = m.dim(1);
    std::vector<double> t(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t[j * r + i] = m.at(i * c + j);
    return Tensor({c, r}, std::move(t));
}

/// Forward and inverse separable transforms over the trailing [H, W] axes.
/// forward(X) = fwd_row X fwd_col^T, inverse(S) = inv_row S inv_col^T.
/// With the fixed DCT, inv_row = D_H^T and inv_col = D_W^T.
struct SpectralPair {
    Tensor fwd_row, fwd_col, inv_row, inv_col;
    bool learnable = false;

    std::size_t height() const { return fwd_row.dim(0); }
    std::size_t width() const { return fwd_col.dim(0); }

    Tensor forward(const Tensor& image) const { return transform2d(image, fwd_row, fwd_col); }
    Tensor inverse(const Tensor& spectrum) const { return transform2d(spectrum, inv_row, inv_col); }

    std::vector<Tensor> parameters() const {
        if (!learnable) return {};
        return {fwd_row, fwd_col, inv_row, inv_col};
    }
};

inline SpectralPair fixed_dct(std::size_t height, std::size_t width) {
    auto dh = dct_matrix(height).matrix;
    auto dw = dct_matrix(width).matrix;
    return {dh, dw, transpose(dh), transpose(dw), false};
}

/// Learnable pair whose four matrices start as exact copies of the DCT ones.
/// The matrices are independent parameters; no orthogonality is maintained.
inline SpectralPair adat_init(std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw std::invalid_argument("adat_init: sizes must be positive");
    const auto fixed = fixed_dct(height, width);
    auto learn = [](const Tensor& m) { return Tensor(m.shape(), m.values(), true); };
    return {learn(fixed.fwd_row), learn(fixed.fwd_col), learn(fixed.inv_row), learn(fixed.inv_col), true};
}

inline Tensor adat_forward(const SpectralPair& layer, const Tensor& image) { return layer.forward(image); }
inline Tensor adat_inverse(const SpectralPair& layer, const Tensor& spectrum) { return layer.inverse(spectrum); }

namespace detail {

inline const SpectralPair& cached_dct(std::size_t height, std::size_t width) {
    thread_local std::deque<SpectralPair> cache;
    for (const auto& p : cache)
        if (p.height() == height && p.width() == width) return p;
    cache.push_back(fixed_dct(height, width));
    return cache.back();
}

inline void check_image(const Tensor& x, const char* op) {
    require(x.defined() && x.rank() >= 2, std::string(op) + ": need trailing [H, W] axes");
}

}  // namespace detail

/// Per-channel orthonormal 2D DCT over the trailing [H, W] axes.
inline Tensor dct2(const Tensor& image) {
    detail::check_image(image, "dct2");
    return detail::cached_dct(image.dim(image.rank() - 2), image.dim(image.rank() - 1)).forward(image);
}

inline Tensor idct2(const Tensor& spectrum) {
    detail::check_image(spectrum, "idct2");
    return detail::cached_dct(spectrum.dim(spectrum.rank() - 2), spectrum.dim(spectrum.rank() - 1)).inverse(spectrum);
}

/// Transforms with an explicit pair; rejects inputs whose trailing axes differ from the basis.
inline Tensor dct2(const Tensor& image, const SpectralPair& pair) {
    detail::check_image(image, "dct2");
    detail::require(image.dim(image.rank() - 2) == pair.height() && image.dim(image.rank() - 1) == pair.width(),
                    "dct2: image " + to_string(image.shape()) + " does not match basis " +
                        std::to_string(pair.height()) + "x" + std::to_string(pair.width()));
    return pair.forward(image);
}

inline Tensor idct2(const Tensor& spectrum, const SpectralPair& pair) {
    detail::check_image(spectrum, "idct2");
    detail::require(spectrum.dim(spectrum.rank() - 2) == pair.height() && spectrum.dim(spectrum.rank() - 1) == pair.width(),
                    "idct2: spectrum " + to_string(spectrum.shape()) + " does not match basis " +
                        std::to_string(pair.height()) + "x" + std::to_string(pair.width()));
    return pair.inverse(spectrum);
}

}  // namespace afd
