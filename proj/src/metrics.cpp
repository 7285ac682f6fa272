#include "flowsr/metrics.hpp"

#include <cmath>
#include <limits>

#include "flowsr/errors.hpp"

namespace flowsr {

double psnr(const Tensor& a, const Tensor& b, double peak) {
    check_same_shape(a, b, "psnr");
    if (peak <= 0.0) throw DomainError("psnr: peak must be positive");
    double se = 0.0;
    const size_t n = a.vec().size();
    for (size_t i = 0; i < n; ++i) {
        const double d = a.vec()[i] - b.vec()[i];
        se += d * d;
    }
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    const double mse = se / static_cast<double>(n);
    return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
constexpr double kC2 = 0.03 * 0.03;

// 11x11 Gaussian window, normalized to sum 1.
const double* ssim_window() {
    static double w[kWin * kWin];
    static bool ready = false;
    if (!ready) {
        double g[kWin];
        for (int i = 0; i < kWin; ++i) {
            const double d = i - (kWin - 1) / 2.0;
            g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        }
        double total = 0.0;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) total += (w[y * kWin + x] = g[y] * g[x]);
        for (double& v : w) v /= total;
        ready = true;
    }
    return w;
}

// [H*W] luma plane of batch element b (ITU-R 601 for RGB, pass-through
// for single-channel input).
std::vector<double> luma_plane(const Tensor& img, int64_t b) {
    const int64_t C = img.dim(1), H = img.dim(2), W = img.dim(3);
    std::vector<double> out(static_cast<size_t>(H * W));
    if (C == 1) {
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) out[static_cast<size_t>(y * W + x)] = img.at4(b, 0, y, x);
    } else {
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                out[static_cast<size_t>(y * W + x)] = 0.299 * img.at4(b, 0, y, x) +
                                                      0.587 * img.at4(b, 1, y, x) +
                                                      0.114 * img.at4(b, 2, y, x);
    }
    return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "ssim");
    if (a.ndim() != 4) throw ShapeError("ssim: expected [B,C,H,W], got " + shape_str(a.shape()));
    const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    if (C != 1 && C != 3)
        throw ShapeError("ssim: expected 1 or 3 channels, got " + std::to_string(C));
    if (H < kWin || W < kWin)
        throw ShapeError("ssim: image smaller than the 11x11 window (" + shape_str(a.shape()) + ")");

    const double* win = ssim_window();
    double batch_mean = 0.0;
    for (int64_t bi = 0; bi < B; ++bi) {
        const std::vector<double> pa = luma_plane(a, bi);
        const std::vector<double> pb = luma_plane(b, bi);
        double acc = 0.0;
        int64_t count = 0;
        for (int64_t y0 = 0; y0 + kWin <= H; ++y0)
            for (int64_t x0 = 0; x0 + kWin <= W; ++x0) {
                double mx = 0.0, my = 0.0, xx = 0.0, yy = 0.0, xy = 0.0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double wv = win[wy * kWin + wx];
                        const double va = pa[static_cast<size_t>((y0 + wy) * W + x0 + wx)];
                        const double vb = pb[static_cast<size_t>((y0 + wy) * W + x0 + wx)];
                        mx += wv * va;
                        my += wv * vb;
                        xx += wv * va * va;
                        yy += wv * vb * vb;
                        xy += wv * va * vb;
                    }
                const double sx = xx - mx * mx;
                const double sy = yy - my * my;
                const double sxy = xy - mx * my;
                acc += ((2.0 * mx * my + kC1) * (2.0 * sxy + kC2)) /
                       ((mx * mx + my * my + kC1) * (sx + sy + kC2));
                ++count;
            }
        batch_mean += acc / static_cast<double>(count);
    }
    return batch_mean / static_cast<double>(B);
}

double lr_psnr(const Tensor& y_sr, const Tensor& x_lr, const DownscaleKernel& kernel) {
    Tensor down = downscale(y_sr, kernel);
    if (!down.same_shape(x_lr))
        throw ShapeError("lr_psnr: downscaled SR is " + shape_str(down.shape()) +
                         " but the LR reference is " + shape_str(x_lr.shape()));
    return psnr(down, x_lr);
}

double diversity_sigma(const std::vector<Tensor>& samples) {
    if (samples.size() < 2) throw UsageError("diversity_sigma: need at least 2 samples");
    const Tensor& first = samples.front();
    for (const Tensor& s : samples) check_same_shape(first, s, "diversity_sigma");

    const size_t n = first.vec().size();
    const double count = static_cast<double>(samples.size());
    double mean_std = 0.0;
    for (size_t i = 0; i < n; ++i) {
        // Bitwise-equal samples contribute exactly 0; rounding in the
        // mean must not fabricate spread where there is none (the
        // deterministic tau=0 case relies on this).
        bool all_same = true;
        for (const Tensor& s : samples) all_same = all_same && s.vec()[i] == first.vec()[i];
        if (all_same) continue;
        double m = 0.0;
        for (const Tensor& s : samples) m += s.vec()[i];
        m /= count;
        double ss = 0.0;
        for (const Tensor& s : samples) {
            const double d = s.vec()[i] - m;
            ss += d * d;
        }
        mean_std += std::sqrt(ss / (count - 1.0));
    }
    return 255.0 * mean_std / static_cast<double>(n);
}

}  // namespace flowsr
