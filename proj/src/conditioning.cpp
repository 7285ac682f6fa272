#include "flowsr/conditioning.hpp"

#include <algorithm>
#include <cmath>

#include "flowsr/errors.hpp"
#include "flowsr/ops.hpp"
#include "flowsr/optim.hpp"

namespace flowsr {

// ---------------------------------------------------------------------------
// LrEncoder
// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
    if (blocks < 1) throw ConfigError("EncoderConfig: blocks must be >= 1");
    if (width < 1) throw ConfigError("EncoderConfig: width must be >= 1");
    if (taps < 1) throw ConfigError("EncoderConfig: taps must be >= 1");
    // Tap positions are stem (0) through block `blocks`, so there are
    // blocks+1 distinct places to read from.
    if (taps > blocks + 1)
        throw ConfigError("EncoderConfig: taps must be <= blocks + 1 (got " +
                          std::to_string(taps) + " taps for " + std::to_string(blocks) +
                          " blocks)");
}

LrEncoder::LrEncoder(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    stem_w_ = he_conv_weight(cfg_.width, 3, 3, rng);
    stem_b_ = Tensor::zeros({cfg_.width});
    blocks_.reserve(static_cast<size_t>(cfg_.blocks));
    for (int64_t i = 0; i < cfg_.blocks; ++i) {
        ResBlock b;
        b.w1 = he_conv_weight(cfg_.width, cfg_.width, 3, rng);
        b.b1 = Tensor::zeros({cfg_.width});
        // Zero second conv: the block starts as the identity.
        b.w2 = Tensor::zeros({cfg_.width, cfg_.width, 3, 3});
        b.b2 = Tensor::zeros({cfg_.width});
        blocks_.push_back(std::move(b));
    }
    if (cfg_.taps == 1) {
        tap_indices_.push_back(cfg_.blocks);
    } else {
        for (int64_t t = 0; t < cfg_.taps; ++t) {
            const double pos = static_cast<double>(t) * static_cast<double>(cfg_.blocks) /
                               static_cast<double>(cfg_.taps - 1);
            tap_indices_.push_back(static_cast<int64_t>(std::llround(pos)));
        }
    }
}

Tensor LrEncoder::forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
        throw ShapeError("LrEncoder::forward: expected [B,3,h,w], got " + shape_str(x.shape()));
    Tensor h = ops::conv2d(x, stem_w_, stem_b_, 1);

    std::vector<Tensor> tapped;
    size_t next = 0;
    auto maybe_tap = [&](int64_t pos, const Tensor& t) {
        if (next < tap_indices_.size() && tap_indices_[next] == pos) {
            tapped.push_back(t);
            ++next;
        }
    };
    maybe_tap(0, h);
    for (int64_t i = 0; i < cfg_.blocks; ++i) {
        const ResBlock& blk = blocks_[static_cast<size_t>(i)];
        Tensor mid = ops::relu(ops::conv2d(h, blk.w1, blk.b1, 1));
        h = ops::add(h, ops::conv2d(mid, blk.w2, blk.b2, 1));
        maybe_tap(i + 1, h);
    }
    return ops::concat_channels(tapped);
}

void LrEncoder::visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "stem.weight", stem_w_);
    fn(prefix + "stem.bias", stem_b_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        // block1..blockN, matching the tap-position numbering where the
        // stem is position 0.
        const std::string base = prefix + "block" + std::to_string(i + 1) + ".";
        fn(base + "conv1.weight", blocks_[i].w1);
        fn(base + "conv1.bias", blocks_[i].b1);
        fn(base + "conv2.weight", blocks_[i].w2);
        fn(base + "conv2.bias", blocks_[i].b2);
    }
}

// ---------------------------------------------------------------------------
// Downscaling
// ---------------------------------------------------------------------------

void DownscaleKernel::validate() const {
    if (factor != 2 && factor != 4 && factor != 8)
        throw ConfigError("DownscaleKernel: factor must be 2, 4 or 8 (got " +
                          std::to_string(factor) + ")");
}

// Cubic convolution kernel with a = -0.5; support (-2, 2).
static double cubic_kernel(double x) {
    const double ax = std::fabs(x);
    if (ax <= 1.0) return (1.5 * ax - 2.5) * ax * ax + 1.0;
    if (ax < 2.0) return ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0;
    return 0.0;
}

// Triangle kernel; support (-1, 1).
static double triangle_kernel(double x) {
    const double ax = std::fabs(x);
    return ax < 1.0 ? 1.0 - ax : 0.0;
}

std::vector<ResampleTap> plan_downscale_axis(int64_t in_size, const DownscaleKernel& k) {
    k.validate();
    if (in_size < 1 || in_size % k.factor != 0)
        throw ShapeError("downscale: size " + std::to_string(in_size) +
                         " not divisible by factor " + std::to_string(k.factor));
    const int64_t out_size = in_size / k.factor;
    std::vector<ResampleTap> plan(static_cast<size_t>(out_size));

    if (k.kind == ResampleKind::box) {
        for (int64_t i = 0; i < out_size; ++i) {
            plan[static_cast<size_t>(i)].start = i * k.factor;
            plan[static_cast<size_t>(i)].w.assign(static_cast<size_t>(k.factor),
                                                  1.0 / static_cast<double>(k.factor));
        }
        return plan;
    }

    double (*kern)(double) =
        (k.kind == ResampleKind::bicubic_a_minus_half) ? cubic_kernel : triangle_kernel;
    const double base_radius = (k.kind == ResampleKind::bicubic_a_minus_half) ? 2.0 : 1.0;
    const double widen = k.antialias ? static_cast<double>(k.factor) : 1.0;
    const double radius = base_radius * widen;

    for (int64_t i = 0; i < out_size; ++i) {
        // Half-pixel centers: output pixel i sits over input coordinate u.
        const double u = (static_cast<double>(i) + 0.5) * static_cast<double>(k.factor) - 0.5;
        const int64_t j0 = static_cast<int64_t>(std::floor(u - radius));
        const int64_t j1 = static_cast<int64_t>(std::ceil(u + radius));
        const int64_t c0 = std::clamp<int64_t>(j0, 0, in_size - 1);
        const int64_t c1 = std::clamp<int64_t>(j1, 0, in_size - 1);

        ResampleTap tap;
        tap.start = c0;
        tap.w.assign(static_cast<size_t>(c1 - c0 + 1), 0.0);
        double total = 0.0;
        for (int64_t j = j0; j <= j1; ++j) {
            const double wv = kern((static_cast<double>(j) - u) / widen);
            if (wv == 0.0) continue;
            // Out-of-range source samples replicate the nearest edge.
            const int64_t cj = std::clamp<int64_t>(j, 0, in_size - 1);
            tap.w[static_cast<size_t>(cj - c0)] += wv;
            total += wv;
        }
        for (double& wv : tap.w) wv /= total;
        plan[static_cast<size_t>(i)] = std::move(tap);
    }
    return plan;
}

static Tensor resample_width(const Tensor& a, const std::vector<ResampleTap>& plan) {
    const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    const int64_t Wo = static_cast<int64_t>(plan.size());
    Tensor out({B, C, H, Wo});
    const double* src = a.data();
    double* dst = out.data();
    const int64_t rows = B * C * H;
    for (int64_t r = 0; r < rows; ++r) {
        const double* in_row = src + r * W;
        double* out_row = dst + r * Wo;
        for (int64_t i = 0; i < Wo; ++i) {
            const ResampleTap& tap = plan[static_cast<size_t>(i)];
            double acc = 0.0;
            for (size_t t = 0; t < tap.w.size(); ++t)
                acc += tap.w[t] * in_row[tap.start + static_cast<int64_t>(t)];
            out_row[i] = acc;
        }
    }
    return out;
}

static Tensor resample_height(const Tensor& a, const std::vector<ResampleTap>& plan) {
    const int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    const int64_t Ho = static_cast<int64_t>(plan.size());
    Tensor out({B, C, Ho, W});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const double* plane = a.data() + (b * C + c) * H * W;
            double* out_plane = out.data() + (b * C + c) * Ho * W;
            for (int64_t i = 0; i < Ho; ++i) {
                const ResampleTap& tap = plan[static_cast<size_t>(i)];
                double* out_row = out_plane + i * W;
                std::fill_n(out_row, W, 0.0);
                for (size_t t = 0; t < tap.w.size(); ++t) {
                    const double wv = tap.w[t];
                    const double* in_row = plane + (tap.start + static_cast<int64_t>(t)) * W;
                    for (int64_t x = 0; x < W; ++x) out_row[x] += wv * in_row[x];
                }
            }
        }
    return out;
}

Tensor downscale(const Tensor& y, const DownscaleKernel& kernel) {
    kernel.validate();
    if (y.ndim() != 4)
        throw ShapeError("downscale: expected [B,C,H,W], got " + shape_str(y.shape()));
    Tensor mid = resample_width(y, plan_downscale_axis(y.dim(3), kernel));
    return resample_height(mid, plan_downscale_axis(y.dim(2), kernel));
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw UsageError("stack_images: empty list");
    const Tensor& first = images.front();
    if (first.ndim() != 4 || first.dim(0) != 1)
        throw ShapeError("stack_images: expected [1,C,H,W] inputs, got " +
                         shape_str(first.shape()));
    for (const Tensor& t : images)
        if (!t.same_shape(first))
            throw ShapeError("stack_images: mismatched shapes " + shape_str(first.shape()) +
                             " vs " + shape_str(t.shape()));
    Tensor out({static_cast<int64_t>(images.size()), first.dim(1), first.dim(2), first.dim(3)});
    const int64_t stride = first.numel();
    for (size_t i = 0; i < images.size(); ++i)
        std::copy_n(images[i].data(), stride, out.data() + stride * static_cast<int64_t>(i));
    return out;
}

PretrainReport pretrain_encoder(LrEncoder& enc, const std::vector<ImagePair>& dataset,
                                int64_t factor, const PretrainOptions& opt, Rng& rng) {
    if (dataset.empty()) throw UsageError("pretrain_encoder: empty dataset");
    if (factor != 2 && factor != 4 && factor != 8)
        throw ConfigError("pretrain_encoder: factor must be 2, 4 or 8");
    if (opt.steps < 1 || opt.batch < 1)
        throw ConfigError("pretrain_encoder: steps and batch must be positive");
    for (const ImagePair& p : dataset) {
        if (p.lr.ndim() != 4 || p.hr.ndim() != 4 || p.lr.dim(0) != 1 || p.hr.dim(0) != 1 ||
            p.hr.dim(1) != p.lr.dim(1) || p.hr.dim(2) != p.lr.dim(2) * factor ||
            p.hr.dim(3) != p.lr.dim(3) * factor)
            throw ShapeError("pretrain_encoder: LR/HR pair inconsistent with factor " +
                             std::to_string(factor));
    }

    const int64_t ch = dataset.front().hr.dim(1);
    Tensor head_w = he_conv_weight(ch * factor * factor, enc.out_channels(), 3, rng);
    Tensor head_b = Tensor::zeros({ch * factor * factor});
    head_w.set_requires_grad(true);
    head_b.set_requires_grad(true);

    std::vector<Tensor> params;
    enc.visit_params("", [&](const std::string&, Tensor& t) {
        t.set_requires_grad(true);
        params.push_back(t);
    });
    params.push_back(head_w);
    params.push_back(head_b);

    Adam::Hyper hp;
    hp.lr = opt.lr;
    Adam adam(params, hp);

    int64_t unshuffles = 0;
    for (int64_t f = factor; f > 1; f /= 2) ++unshuffles;

    PretrainReport report;
    report.loss.reserve(static_cast<size_t>(opt.steps));
    for (int64_t step = 0; step < opt.steps; ++step) {
        std::vector<Tensor> lrs, hrs;
        for (int64_t b = 0; b < opt.batch; ++b) {
            const ImagePair& pair = dataset[rng.next_u64() % dataset.size()];
            lrs.push_back(pair.lr);
            hrs.push_back(pair.hr);
        }
        Tensor x = stack_images(lrs);
        Tensor target = stack_images(hrs);

        Tape tape;
        Tensor u = enc.forward(x);
        Tensor pred = ops::conv2d(u, head_w, head_b, 1);
        for (int64_t i = 0; i < unshuffles; ++i) pred = ops::unsqueeze2x2(pred);
        Tensor loss = ops::mean(ops::abs(ops::sub(pred, target)));
        tape.backward(loss);
        adam.step(tape, opt.grad_clip);
        report.loss.push_back(loss.item());
    }

    // The head dies with this scope; leave the encoder's grad flags the
    // way a fresh encoder has them.
    enc.visit_params("", [](const std::string&, Tensor& t) { t.set_requires_grad(false); });
    return report;
}

}  // namespace flowsr
