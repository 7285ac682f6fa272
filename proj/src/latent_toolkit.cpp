#include "flowsr/latent_toolkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "flowsr/errors.hpp"
#include "flowsr/metrics.hpp"
#include "flowsr/tape.hpp"

namespace flowsr {

double gamma_sample(Rng& rng, double shape, double scale) {
    if (shape <= 0.0) throw DomainError("gamma_sample: shape must be positive");
    if (scale < 0.0) throw DomainError("gamma_sample: scale must be >= 0");
    if (scale == 0.0) return 0.0;

    // Marsaglia-Tsang: squeeze acceptance around (1 + c x)^3 with
    // d = k - 1/3. Shapes below 1 route through Gamma(k+1) times U^(1/k).
    double boost = 1.0;
    double k = shape;
    if (k < 1.0) {
        boost = std::pow(rng.uniform(), 1.0 / k);
        k += 1.0;
    }
    const double d = k - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        const double x = rng.gaussian();
        const double t = 1.0 + c * x;
        if (t <= 0.0) continue;
        const double v = t * t * t;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return boost * scale * d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return boost * scale * d * v;
    }
}

MomentDraw draw_moments(Rng& rng, int64_t n, double tau) {
    if (n < 2) throw DomainError("draw_moments: collection size must be >= 2");
    if (tau < 0.0) throw DomainError("draw_moments: tau must be >= 0");
    MomentDraw d;
    d.n = n;
    d.tau = tau;
    if (tau == 0.0) return d;  // point mass at (0, 0)
    const double tv = tau * tau;  // the laws below take the variance
    d.mu_hat = std::sqrt(tv / static_cast<double>(n)) * rng.gaussian();
    d.sigma2_hat =
        gamma_sample(rng, (static_cast<double>(n) - 1.0) / 2.0, 2.0 * tv / (static_cast<double>(n) - 1.0));
    return d;
}

LevelMasks map_region_to_levels(const Region& region, int64_t hr_h, int64_t hr_w,
                                const std::vector<std::vector<int64_t>>& latent_shapes) {
    if (!region.empty() && (region.x < 0 || region.y < 0 || region.x + region.w > hr_w ||
                            region.y + region.h > hr_h))
        throw DomainError("map_region_to_levels: region [" + std::to_string(region.x) + "," +
                          std::to_string(region.y) + " " + std::to_string(region.w) + "x" +
                          std::to_string(region.h) + "] exceeds " + std::to_string(hr_w) + "x" +
                          std::to_string(hr_h));
    LevelMasks masks;
    masks.reserve(latent_shapes.size());
    for (const std::vector<int64_t>& shape : latent_shapes) {
        if (shape.size() != 4) throw ShapeError("map_region_to_levels: latent shapes must be 4-D");
        const int64_t h = shape[2], w = shape[3];
        std::vector<uint8_t> mask(static_cast<size_t>(h * w), 0);
        if (!region.empty()) {
            if (hr_h % h != 0 || hr_w % w != 0)
                throw ShapeError("map_region_to_levels: latent grid does not divide the HR size");
            const int64_t sy = hr_h / h, sx = hr_w / w;
            const int64_t r0 = std::max<int64_t>(0, region.y / sy - 1);
            const int64_t r1 = std::min<int64_t>(h - 1, (region.y + region.h - 1) / sy + 1);
            const int64_t c0 = std::max<int64_t>(0, region.x / sx - 1);
            const int64_t c1 = std::min<int64_t>(w - 1, (region.x + region.w - 1) / sx + 1);
            for (int64_t r = r0; r <= r1; ++r)
                for (int64_t c = c0; c <= c1; ++c) mask[static_cast<size_t>(r * w + c)] = 1;
        }
        masks.push_back(std::move(mask));
    }
    return masks;
}

namespace {

// A collection member: (level, flat index into that level's buffer).
using Member = std::pair<size_t, int64_t>;

void apply_to_collection(std::vector<Tensor>& z, const std::vector<Member>& members,
                         int64_t collection_index, double tau, const Rng& rng,
                         NormalizeReport& report) {
    if (members.empty()) return;
    if (members.size() < 2)
        throw UsageError("normalize_latents: a collection of size 1 cannot be normalized");
    ++report.collections;

    const double n = static_cast<double>(members.size());
    double mean = 0.0;
    for (const Member& m : members) mean += z[m.first].vec()[static_cast<size_t>(m.second)];
    mean /= n;
    double ss = 0.0;
    for (const Member& m : members) {
        const double d = z[m.first].vec()[static_cast<size_t>(m.second)] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / (n - 1.0));
    if (sd <= 1e-12) {
        ++report.skipped_degenerate;
        return;
    }

    Rng child = rng.derive(static_cast<uint64_t>(collection_index));
    const MomentDraw d = draw_moments(child, static_cast<int64_t>(members.size()), tau);
    const double gain = std::sqrt(d.sigma2_hat) / sd;
    for (const Member& m : members) {
        double& v = z[m.first].vec()[static_cast<size_t>(m.second)];
        v = gain * (v - mean) + d.mu_hat;
    }
    ++report.normalized;
}

}  // namespace

std::vector<Tensor> normalize_latents(const std::vector<Tensor>& z, NormStrategy strategy,
                                      double tau, const Rng& rng, const LevelMasks* masks,
                                      NormalizeReport* report) {
    if (z.empty()) throw UsageError("normalize_latents: empty latent stack");
    for (const Tensor& t : z) {
        if (t.ndim() != 4) throw ShapeError("normalize_latents: latents must be [1,C,H,W]");
        if (t.dim(0) != 1)
            throw UsageError("normalize_latents: latent manipulation works on single images");
    }
    if (masks && masks->size() != z.size())
        throw UsageError("normalize_latents: one mask per level required");
    if (masks)
        for (size_t l = 0; l < z.size(); ++l)
            if (static_cast<int64_t>((*masks)[l].size()) != z[l].dim(2) * z[l].dim(3))
                throw ShapeError("normalize_latents: mask size does not match the latent grid");

    std::vector<Tensor> out;
    out.reserve(z.size());
    for (const Tensor& t : z) out.push_back(t.clone());

    NormalizeReport local_report;
    NormalizeReport& rep = report ? *report : local_report;
    rep = NormalizeReport{};

    auto in_mask = [&](size_t l, int64_t i, int64_t j) {
        return !masks || (*masks)[l][static_cast<size_t>(i * z[l].dim(3) + j)] != 0;
    };

    // Collection indices follow a fixed level-major enumeration so the
    // per-collection RNG streams are stable no matter how the work would
    // be scheduled.
    int64_t cidx = 0;
    switch (strategy) {
        case NormStrategy::global: {
            std::vector<Member> members;
            for (size_t l = 0; l < out.size(); ++l) {
                const int64_t C = out[l].dim(1), H = out[l].dim(2), W = out[l].dim(3);
                for (int64_t k = 0; k < C; ++k)
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j)
                            if (in_mask(l, i, j)) members.push_back({l, (k * H + i) * W + j});
            }
            apply_to_collection(out, members, cidx++, tau, rng, rep);
            break;
        }
        case NormStrategy::local: {
            for (size_t l = 0; l < out.size(); ++l) {
                const int64_t C = out[l].dim(1), H = out[l].dim(2), W = out[l].dim(3);
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j) {
                        std::vector<Member> members;
                        if (in_mask(l, i, j)) {
                            members.reserve(static_cast<size_t>(C));
                            for (int64_t k = 0; k < C; ++k)
                                members.push_back({l, (k * H + i) * W + j});
                        }
                        apply_to_collection(out, members, cidx++, tau, rng, rep);
                    }
            }
            break;
        }
        case NormStrategy::spatial: {
            for (size_t l = 0; l < out.size(); ++l) {
                const int64_t C = out[l].dim(1), H = out[l].dim(2), W = out[l].dim(3);
                for (int64_t k = 0; k < C; ++k) {
                    std::vector<Member> members;
                    members.reserve(static_cast<size_t>(H * W));
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j)
                            if (in_mask(l, i, j)) members.push_back({l, (k * H + i) * W + j});
                    apply_to_collection(out, members, cidx++, tau, rng, rep);
                }
            }
            break;
        }
    }
    return out;
}

namespace {

std::vector<std::vector<int64_t>> shapes_of(const std::vector<Tensor>& z) {
    std::vector<std::vector<int64_t>> shapes;
    shapes.reserve(z.size());
    for (const Tensor& t : z) shapes.push_back(t.shape());
    return shapes;
}

void check_single_image(const Tensor& t, const char* what) {
    if (t.ndim() != 4 || t.dim(0) != 1)
        throw ShapeError(std::string(what) + ": expected a [1,C,H,W] image, got " +
                         shape_str(t.shape()));
}

}  // namespace

Tensor style_transfer(const FlowModel& model, const LrEncoder& enc,
                      const DownscaleKernel& kernel, const Tensor& y_src, const Tensor& x_tgt,
                      double tau, const Rng& rng, const Region* region) {
    check_single_image(y_src, "style_transfer source");
    check_single_image(x_tgt, "style_transfer target");
    NoGradGuard guard;

    Tensor x_src = downscale(y_src, kernel);
    if (!x_tgt.same_shape(x_src))
        throw ShapeError("style_transfer: target LR is " + shape_str(x_tgt.shape()) +
                         " but the source downscales to " + shape_str(x_src.shape()));

    std::vector<Tensor> z = model.encode(y_src, enc.forward(x_src)).z;

    if (region) {
        const LevelMasks masks =
            map_region_to_levels(*region, y_src.dim(2), y_src.dim(3), shapes_of(z));
        Rng fresh_rng = rng.derive(0);
        std::vector<Tensor> fresh =
            model.draw_latents(1, y_src.dim(2), y_src.dim(3), tau, fresh_rng);
        for (size_t l = 0; l < z.size(); ++l) {
            const int64_t C = z[l].dim(1), H = z[l].dim(2), W = z[l].dim(3);
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    if (masks[l][static_cast<size_t>(i * W + j)]) continue;  // keep the encoding
                    for (int64_t k = 0; k < C; ++k) z[l].at4(0, k, i, j) = fresh[l].at4(0, k, i, j);
                }
        }
    }
    return model.decode(z, enc.forward(x_tgt));
}

Tensor content_transfer(const FlowModel& model, const LrEncoder& enc,
                        const DownscaleKernel& kernel, const Tensor& y_base, const Tensor& patch,
                        int64_t at_x, int64_t at_y, double tau, const Rng& rng) {
    check_single_image(y_base, "content_transfer base");
    Region region{at_x, at_y, 0, 0};
    if (patch.defined()) {
        check_single_image(patch, "content_transfer patch");
        if (patch.dim(1) != y_base.dim(1))
            throw ShapeError("content_transfer: patch channel count differs from the image");
        region.w = patch.dim(3);
        region.h = patch.dim(2);
        if (at_x < 0 || at_y < 0 || at_x + region.w > y_base.dim(3) ||
            at_y + region.h > y_base.dim(2))
            throw DomainError("content_transfer: patch placement out of bounds");
    }
    NoGradGuard guard;

    // The LR conditioning stays that of the unedited base image; the
    // paste only changes what gets encoded.
    Tensor x = downscale(y_base, kernel);
    Tensor u = enc.forward(x);

    Tensor pasted = y_base.clone();
    if (patch.defined())
        for (int64_t c = 0; c < patch.dim(1); ++c)
            for (int64_t i = 0; i < region.h; ++i)
                for (int64_t j = 0; j < region.w; ++j)
                    pasted.at4(0, c, at_y + i, at_x + j) = patch.at4(0, c, i, j);

    std::vector<Tensor> z = model.encode(pasted, u).z;
    const LevelMasks masks = map_region_to_levels(region, y_base.dim(2), y_base.dim(3), shapes_of(z));
    z = normalize_latents(z, NormStrategy::local, tau, rng, &masks);
    return model.decode(z, u);
}

Tensor restore(const FlowModel& model, const LrEncoder& enc, const DownscaleKernel& kernel,
               const Tensor& y_degraded, double tau, const Rng& rng, NormalizeReport* report) {
    check_single_image(y_degraded, "restore");
    NoGradGuard guard;

    Tensor x = downscale(y_degraded, kernel);
    Tensor u = enc.forward(x);
    std::vector<Tensor> z = model.encode(y_degraded, u).z;

    // Spatial first, then local, each from its own independent stream.
    const Rng spatial_rng = rng.derive(0);
    const Rng local_rng = rng.derive(1);
    NormalizeReport rs, rl;
    z = normalize_latents(z, NormStrategy::spatial, tau, spatial_rng, nullptr, &rs);
    z = normalize_latents(z, NormStrategy::local, tau, local_rng, nullptr, &rl);
    if (report) {
        report->collections = rs.collections + rl.collections;
        report->normalized = rs.normalized + rl.normalized;
        report->skipped_degenerate = rs.skipped_degenerate + rl.skipped_degenerate;
    }
    return model.decode(z, u);
}

Tensor sample_best_of_n(const FlowModel& model, const LrEncoder& enc, const Tensor& x_lr,
                        double tau, int64_t n, SelectMetric metric, const Tensor& y_ref,
                        const Rng& rng) {
    if (n < 1) throw UsageError("sample_best_of_n: n must be >= 1");
    check_single_image(x_lr, "sample_best_of_n LR input");
    NoGradGuard guard;

    Tensor u = enc.forward(x_lr);
    Tensor best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k < n; ++k) {
        Rng child = rng.derive(static_cast<uint64_t>(k));
        Tensor y = model.sample(u, tau, child);
        const double score = metric == SelectMetric::psnr ? psnr(y, y_ref) : ssim(y, y_ref);
        if (score > best_score || !best.defined()) {
            best_score = score;
            best = y;
        }
    }
    return best;
}

}  // namespace flowsr
