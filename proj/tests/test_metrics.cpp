#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "flowsr/metrics.hpp"
#include "flowsr/rng.hpp"

using namespace flowsr;

namespace {

Tensor smooth_image(int64_t h, int64_t w, uint64_t seed, double lo = 0.3, double hi = 0.7) {
    Rng rng(seed);
    const double fy = 1.0 + 2.0 * rng.uniform();
    const double fx = 1.0 + 2.0 * rng.uniform();
    const double ph = 6.28 * rng.uniform();
    Tensor img({1, 3, h, w});
    const double mid = 0.5 * (lo + hi), amp = 0.5 * (hi - lo);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                img.at4(0, c, y, x) = mid + amp * std::sin(fy * y / h + fx * x / w + ph + 0.9 * c);
    return img;
}

// Direct windowed-formula SSIM, written from the definition with
// two-pass moments -- deliberately different arithmetic from the
// production one-pass version.
double oracle_ssim_gray(const std::vector<double>& a, const std::vector<double>& b, int64_t h,
                        int64_t w) {
    const int k = 11;
    const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
    std::vector<double> win(k * k);
    double wsum = 0.0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            const double dy = y - 5.0, dx = x - 5.0;
            win[y * k + x] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            wsum += win[y * k + x];
        }
    for (double& v : win) v /= wsum;

    double total = 0.0;
    int64_t count = 0;
    for (int64_t y0 = 0; y0 + k <= h; ++y0)
        for (int64_t x0 = 0; x0 + k <= w; ++x0) {
            double mx = 0.0, my = 0.0;
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x) {
                    mx += win[y * k + x] * a[(y0 + y) * w + x0 + x];
                    my += win[y * k + x] * b[(y0 + y) * w + x0 + x];
                }
            double vx = 0.0, vy = 0.0, cov = 0.0;
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x) {
                    const double da = a[(y0 + y) * w + x0 + x] - mx;
                    const double db = b[(y0 + y) * w + x0 + x] - my;
                    vx += win[y * k + x] * da * da;
                    vy += win[y * k + x] * db * db;
                    cov += win[y * k + x] * da * db;
                }
            total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                     ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return total / count;
}

std::vector<double> luma601(const Tensor& img) {
    const int64_t h = img.dim(2), w = img.dim(3);
    std::vector<double> out(h * w);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            out[y * w + x] = 0.299 * img.at4(0, 0, y, x) + 0.587 * img.at4(0, 1, y, x) +
                             0.114 * img.at4(0, 2, y, x);
    return out;
}

}  // namespace

// ---- psnr ----

TEST_CASE("psnr of identical images is +inf") {
    Tensor a = smooth_image(8, 8, 1);
    CHECK(std::isinf(psnr(a, a)));
    CHECK(psnr(a, a) > 0);
}

TEST_CASE("psnr of a uniform 10/255 difference is 20*log10(25.5) dB") {
    Tensor a = Tensor::full({1, 3, 8, 8}, 0.5);
    Tensor b = Tensor::full({1, 3, 8, 8}, 0.5 + 10.0 / 255.0);
    const double expect = 20.0 * std::log10(255.0 / 10.0);  // ~28.131
    CHECK(psnr(a, b) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(psnr(b, a) == doctest::Approx(psnr(a, b)).epsilon(1e-15));
}

TEST_CASE("psnr is scale invariant when peak scales with the data") {
    Tensor a = smooth_image(10, 10, 3);
    Tensor b = smooth_image(10, 10, 4);
    Tensor a255 = a.clone(), b255 = b.clone();
    for (double& v : a255.vec()) v *= 255.0;
    for (double& v : b255.vec()) v *= 255.0;
    CHECK(psnr(a, b, 1.0) == doctest::Approx(psnr(a255, b255, 255.0)).epsilon(1e-12));
}

TEST_CASE("psnr input validation") {
    CHECK_THROWS_AS(psnr(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 4, 5})), ShapeError);
    CHECK_THROWS_AS(psnr(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 4, 4}), 0.0),
                    DomainError);
}

// ---- ssim ----

TEST_CASE("ssim of an image with itself is 1") {
    Tensor a = smooth_image(16, 16, 5);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim matches a direct windowed-formula oracle") {
    Tensor a = smooth_image(18, 14, 7);
    Tensor b = a.clone();
    Rng rng(11);
    for (double& v : b.vec()) v += 0.05 * rng.gaussian();
    const double got = ssim(a, b);
    const double want = oracle_ssim_gray(luma601(a), luma601(b), 18, 14);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
    CHECK(got < 1.0);
    CHECK(got > 0.0);
}

TEST_CASE("inverting a checkerboard flips the structure term negative") {
    Tensor a({1, 1, 16, 16});
    for (int64_t y = 0; y < 16; ++y)
        for (int64_t x = 0; x < 16; ++x) a.at4(0, 0, y, x) = ((x + y) % 2 == 0) ? 1.0 : 0.0;
    Tensor b = a.clone();
    for (double& v : b.vec()) v = 1.0 - v;
    const double got = ssim(a, b);
    CHECK(got < 0.0);
    // Same answer from the independent oracle.
    std::vector<double> pa(16 * 16), pb(16 * 16);
    for (int i = 0; i < 256; ++i) {
        pa[i] = a.vec()[i];
        pb[i] = b.vec()[i];
    }
    CHECK(got == doctest::Approx(oracle_ssim_gray(pa, pb, 16, 16)).epsilon(1e-10));
}

TEST_CASE("ssim is stable under a common constant shift") {
    // Contrast and structure are exactly shift invariant; only the
    // luminance term moves, and with near-equal window means that drift
    // stays tiny.
    Tensor a = smooth_image(16, 16, 13);
    Tensor b = a.clone();
    Rng rng(17);
    for (double& v : b.vec()) v += 0.003 * rng.gaussian();
    Tensor a2 = a.clone(), b2 = b.clone();
    for (double& v : a2.vec()) v += 0.1;
    for (double& v : b2.vec()) v += 0.1;
    CHECK(std::fabs(ssim(a, b) - ssim(a2, b2)) < 1e-6);
}

TEST_CASE("ssim is symmetric") {
    Tensor a = smooth_image(16, 16, 19);
    Tensor b = smooth_image(16, 16, 23);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
}

TEST_CASE("ssim rejects undersized or non-image input") {
    CHECK_THROWS_AS(ssim(Tensor::zeros({1, 3, 10, 16}), Tensor::zeros({1, 3, 10, 16})),
                    ShapeError);
    CHECK_THROWS_AS(ssim(Tensor::zeros({1, 2, 16, 16}), Tensor::zeros({1, 2, 16, 16})),
                    ShapeError);
    CHECK_THROWS_AS(ssim(Tensor::zeros({1, 3, 16, 16}), Tensor::zeros({1, 3, 16, 15})),
                    ShapeError);
}

// ---- lr_psnr ----

TEST_CASE("lr_psnr of an SR image consistent with its LR input is +inf") {
    Tensor y = smooth_image(16, 16, 29);
    DownscaleKernel k{ResampleKind::bicubic_a_minus_half, 4, true};
    Tensor x = downscale(y, k);
    CHECK(std::isinf(lr_psnr(y, x, k)));
}

TEST_CASE("lr_psnr penalizes inconsistency and checks shapes") {
    Tensor y = smooth_image(16, 16, 31);
    DownscaleKernel k{ResampleKind::bicubic_a_minus_half, 4, true};
    Tensor x = downscale(smooth_image(16, 16, 37), k);
    const double v = lr_psnr(y, x, k);
    CHECK(std::isfinite(v));
    CHECK(v < 40.0);
    CHECK_THROWS_AS(lr_psnr(y, Tensor::zeros({1, 3, 8, 8}), k), ShapeError);
}

// ---- diversity ----

TEST_CASE("diversity of identical samples is zero") {
    Tensor a = smooth_image(8, 8, 41);
    CHECK(diversity_sigma({a, a.clone(), a.clone()}) == 0.0);
}

TEST_CASE("two samples a constant 2/255 apart have diversity sqrt(2)") {
    Tensor a = Tensor::full({1, 3, 6, 6}, 0.4);
    Tensor b = Tensor::full({1, 3, 6, 6}, 0.4 + 2.0 / 255.0);
    CHECK(diversity_sigma({a, b}) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));
    CHECK(diversity_sigma({b, a}) == doctest::Approx(diversity_sigma({a, b})).epsilon(1e-15));
}

TEST_CASE("diversity needs two samples of one shape") {
    Tensor a = Tensor::zeros({1, 3, 6, 6});
    CHECK_THROWS_AS(diversity_sigma({a}), UsageError);
    CHECK_THROWS_AS(diversity_sigma({a, Tensor::zeros({1, 3, 6, 5})}), ShapeError);
}
