#include "afd/gradcheck.hpp"
#include "afd/rng.hpp"
#include "afd/spectral.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace afd;

namespace {

Tensor random_image(Shape shape, Rng& rng) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform();
    return Tensor(std::move(shape), std::move(v));
}

double basis(std::size_t u, std::size_t j, std::size_t n) {
    const double c = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    return c * std::cos(std::numbers::pi * (2.0 * j + 1.0) * u / (2.0 * n));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.numel(); ++k) worst = std::max(worst, std::abs(a.at(k) - b.at(k)));
    return worst;
}

}  // namespace

TEST(DctMatrix, SmallSizesClosedForm) {
    EXPECT_EQ(dct_matrix(1).matrix.values(), std::vector<double>{1.0});
    const auto d2 = dct_matrix(2).matrix;
    const double r = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(d2.at(0), r, 1e-15);
    EXPECT_NEAR(d2.at(1), r, 1e-15);
    EXPECT_NEAR(d2.at(2), r, 1e-15);
    EXPECT_NEAR(d2.at(3), -r, 1e-15);
    EXPECT_THROW(dct_matrix(0), std::invalid_argument);
}

TEST(DctMatrix, OrthonormalByDirectSummation) {
    for (std::size_t n : {1u, 2u, 4u, 8u, 16u, 64u}) {
        const auto d = dct_matrix(n).matrix;
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < n; ++k) acc += d.at(i * n + k) * d.at(j * n + k);
                worst = std::max(worst, std::abs(acc - (i == j ? 1.0 : 0.0)));
            }
        EXPECT_LT(worst, n == 8 ? 1e-12 : 1e-10) << "N=" << n;
        for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(d.at(j), std::sqrt(1.0 / n), 1e-15);
    }
}

TEST(Dct2, ConstantImageConcentratesInDc) {
    const std::size_t n = 8;
    const double c = 0.37;
    const auto s = dct2(Tensor::full({1, n, n}, c));
    EXPECT_NEAR(s.at(0), c * n, 1e-12);
    for (std::size_t k = 1; k < s.numel(); ++k) EXPECT_NEAR(s.at(k), 0.0, 1e-12);
}

TEST(Dct2, IsLinear) {
    Rng rng(2);
    const auto x = random_image({3, 8, 6}, rng), y = random_image({3, 8, 6}, rng);
    const double a = 1.7, b = -0.4;
    const auto lhs = dct2(add(mul_scalar(x, a), mul_scalar(y, b)));
    const auto rhs = add(mul_scalar(dct2(x), a), mul_scalar(dct2(y), b));
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
}

TEST(Dct2, MatchesDirectDefinitionOn6x6) {
    Rng rng(4);
    const std::size_t n = 6;
    const auto x = random_image({2, n, n}, rng);
    const auto s = dct2(x);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t u = 0; u < n; ++u)
            for (std::size_t v = 0; v < n; ++v) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) acc += basis(u, i, n) * basis(v, j, n) * x.at((c * n + i) * n + j);
                EXPECT_NEAR(s.at((c * n + u) * n + v), acc, 1e-10);
            }
}

TEST(Dct2, PreservesEnergyPerChannel) {
    Rng rng(8);
    const auto x = random_image({3, 16, 12}, rng);
    const auto s = dct2(x);
    for (std::size_t c = 0; c < 3; ++c) {
        double ex = 0.0, es = 0.0;
        for (std::size_t k = 0; k < 16 * 12; ++k) {
            ex += x.at(c * 192 + k) * x.at(c * 192 + k);
            es += s.at(c * 192 + k) * s.at(c * 192 + k);
        }
        EXPECT_NEAR(ex, es, 1e-9);
    }
}

TEST(Idct2, RoundTripAndZero) {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = random_image({2, 16, 16}, rng);
        EXPECT_LT(max_abs_diff(idct2(dct2(x)), x), 1e-9);
    }
    const auto zero = idct2(Tensor::zeros({1, 4, 4}));
    for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(Idct2, SingleCoefficientIsSampledCosine) {
    const std::size_t n = 8, u = 2, v = 5;
    auto spec = Tensor::zeros({1, n, n});
    std::vector<double> vals(n * n, 0.0);
    vals[u * n + v] = 1.0;
    const auto img = idct2(Tensor({1, n, n}, vals));
    // Hand-evaluated points: c(2) = c(5) = 0.5 for N = 8.
    const std::pair<std::size_t, std::size_t> points[] = {{0, 0}, {1, 3}, {4, 7}, {7, 2}};
    for (auto [i, j] : points) {
        const double expected = 0.5 * std::cos(std::numbers::pi * (2.0 * i + 1.0) * u / 16.0) * 0.5 *
                                std::cos(std::numbers::pi * (2.0 * j + 1.0) * v / 16.0);
        EXPECT_NEAR(img.at(i * n + j), expected, 1e-12);
    }
    EXPECT_NEAR(img.at(0), 0.5 * std::cos(std::numbers::pi * 2.0 / 16.0) * 0.5 * std::cos(std::numbers::pi * 5.0 / 16.0),
                1e-12);
}

TEST(Dct2, ShapeMismatchWithBasisRejected) {
    const auto pair = fixed_dct(8, 8);
    EXPECT_THROW(dct2(Tensor::zeros({1, 8, 6}), pair), ShapeError);
    EXPECT_THROW(idct2(Tensor::zeros({1, 6, 8}), pair), ShapeError);
}

TEST(AdaT, InitialisedLayersReproduceFixedTransformBitExactly) {
    Rng rng(12);
    const auto x = random_image({3, 32, 32}, rng);
    const auto layer = adat_init(32, 32);
    EXPECT_EQ(adat_forward(layer, x).values(), dct2(x).values());
    const auto s = dct2(x);
    EXPECT_EQ(adat_inverse(layer, s).values(), idct2(s).values());
    EXPECT_LT(max_abs_diff(adat_inverse(layer, s), x), 1e-9);
    EXPECT_EQ(layer.parameters().size(), 4u);
    for (const auto& p : layer.parameters()) EXPECT_TRUE(p.requires_grad());
    EXPECT_THROW(adat_init(0, 4), std::invalid_argument);
}

TEST(AdaT, GradientWithRespectToTransformsMatchesFiniteDifferences) {
    Rng rng(13);
    const auto x = random_image({2, 6, 5}, rng);
    const auto layer = adat_init(6, 5);
    const auto weights = random_image({6, 5}, rng);
    auto f = [&] {
        auto s = adat_forward(layer, x);
        auto back = adat_inverse(layer, mul(s, weights));
        return mean(mul(back, back));
    };
    const auto report = finite_diff_check(f, layer.parameters(), 1e-5);
    EXPECT_LT(report.max_rel_error, 1e-4);
    EXPECT_EQ(report.checked, 2 * 36u + 2 * 25u);
}
