#include "flowsr/flow_layers.hpp"

#include <cmath>

#include "flowsr/errors.hpp"
#include "flowsr/linalg.hpp"
#include "flowsr/ops.hpp"

namespace flowsr {

Tensor soft_clamp(const Tensor& raw_scale) {
    return ops::scale(ops::tanh(ops::scale(raw_scale, 1.0 / kScaleClamp)), kScaleClamp);
}

Tensor he_conv_weight(int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng) {
    double fan_in = static_cast<double>(in_ch * k * k);
    return gauss_sample(rng, {out_ch, in_ch, k, k}, std::sqrt(2.0 / fan_in));
}

// ---- ActNorm ----

ActNorm::ActNorm(int64_t channels)
    : scale_(Tensor({channels}, 1.0)), bias_(Tensor({channels}, 0.0)) {}

void ActNorm::init_from(const Tensor& h) {
    if (h.ndim() != 4 || h.dim(1) != channels()) {
        throw ShapeError("actnorm init: expected [B,C,H,W] with C = " + std::to_string(channels()));
    }
    int64_t batch = h.dim(0), ch = h.dim(1), plane = h.dim(2) * h.dim(3);
    int64_t n = batch * plane;
    for (int64_t c = 0; c < ch; ++c) {
        double mu = 0.0;
        for (int64_t b = 0; b < batch; ++b) {
            const double* p = h.data() + (b * ch + c) * plane;
            for (int64_t i = 0; i < plane; ++i) mu += p[i];
        }
        mu /= static_cast<double>(n);
        double ss = 0.0;
        for (int64_t b = 0; b < batch; ++b) {
            const double* p = h.data() + (b * ch + c) * plane;
            for (int64_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
        }
        double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
        if (sd < 1e-12) {
            // constant channel: only center it
            scale_.vec()[static_cast<size_t>(c)] = 1.0;
            bias_.vec()[static_cast<size_t>(c)] = -mu;
        } else {
            scale_.vec()[static_cast<size_t>(c)] = 1.0 / sd;
            bias_.vec()[static_cast<size_t>(c)] = -mu / sd;
        }
    }
    initialized_ = true;
}

Tensor ActNorm::forward(const Tensor& h, Tensor& logdet) const {
    for (double s : scale_.vec()) {
        if (s == 0.0) throw SingularError("actnorm: zero scale");
    }
    Tensor out = ops::channel_shift(ops::channel_scale(h, scale_), bias_);
    double area = static_cast<double>(h.dim(2) * h.dim(3));
    Tensor ld = ops::scale(ops::sum(ops::log_abs(scale_)), area);
    logdet = ops::add_bcast(logdet, ld);
    return out;
}

Tensor ActNorm::inverse(const Tensor& h) const {
    for (double s : scale_.vec()) {
        if (s == 0.0) throw SingularError("actnorm: zero scale");
    }
    Tensor inv_s({channels()});
    Tensor neg_bs({channels()});
    for (int64_t c = 0; c < channels(); ++c) {
        double s = scale_.vec()[static_cast<size_t>(c)];
        inv_s.vec()[static_cast<size_t>(c)] = 1.0 / s;
        neg_bs.vec()[static_cast<size_t>(c)] = -bias_.vec()[static_cast<size_t>(c)] / s;
    }
    return ops::channel_shift(ops::channel_scale(h, inv_s), neg_bs);
}

void ActNorm::visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "scale", scale_);
    fn(prefix + "bias", bias_);
}

// ---- Inv1x1 ----

Inv1x1::Inv1x1(int64_t channels, Rng& rng) {
    weight_ = Tensor::from_data({channels, channels}, linalg::random_rotation(channels, rng));
}

Tensor Inv1x1::forward(const Tensor& h, Tensor& logdet) const {
    Tensor out = ops::channel_transform(h, weight_);
    double area = static_cast<double>(h.dim(2) * h.dim(3));
    Tensor ld = ops::scale(ops::logabsdet(weight_), area);  // SingularError if degenerate
    logdet = ops::add_bcast(logdet, ld);
    return out;
}

Tensor Inv1x1::inverse(const Tensor& h) const {
    int64_t c = weight_.dim(0);
    Tensor w_inv = Tensor::from_data({c, c}, linalg::invert(weight_.vec(), c));
    return ops::channel_transform(h, w_inv);
}

void Inv1x1::visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "weight", weight_);
}

// ---- CouplingNet ----

CouplingNet::CouplingNet(int64_t in_channels, int64_t hidden, int64_t out_channels, Rng& rng) {
    if (in_channels < 1 || hidden < 1 || out_channels < 1) {
        throw ConfigError("coupling net: channel counts must be positive");
    }
    w1_ = he_conv_weight(hidden, in_channels, 3, rng);
    b1_ = Tensor({hidden}, 0.0);
    w2_ = he_conv_weight(hidden, hidden, 3, rng);
    b2_ = Tensor({hidden}, 0.0);
    // zero heads: the first forward pass is an exact identity transform
    ws_ = Tensor({out_channels, hidden, 3, 3}, 0.0);
    bs_ = Tensor({out_channels}, 0.0);
    wb_ = Tensor({out_channels, hidden, 3, 3}, 0.0);
    bb_ = Tensor({out_channels}, 0.0);
}

std::pair<Tensor, Tensor> CouplingNet::heads(const Tensor& x) const {
    Tensor t = ops::relu(ops::conv2d(x, w1_, b1_, 1));
    t = ops::relu(ops::conv2d(t, w2_, b2_, 1));
    Tensor raw_scale = ops::conv2d(t, ws_, bs_, 1);
    Tensor shift = ops::conv2d(t, wb_, bb_, 1);
    return {raw_scale, shift};
}

void CouplingNet::visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + "conv1.weight", w1_);
    fn(prefix + "conv1.bias", b1_);
    fn(prefix + "conv2.weight", w2_);
    fn(prefix + "conv2.bias", b2_);
    fn(prefix + "scale_head.weight", ws_);
    fn(prefix + "scale_head.bias", bs_);
    fn(prefix + "shift_head.weight", wb_);
    fn(prefix + "shift_head.bias", bb_);
}

// ---- AffineCoupling ----

namespace {

void check_cond(const Tensor& h, const Tensor& u, int64_t cond_channels, const char* who) {
    if (cond_channels == 0) return;
    if (!u.defined()) throw ShapeError(std::string(who) + ": conditioning features required");
    if (u.ndim() != 4 || u.dim(1) != cond_channels) {
        throw ShapeError(std::string(who) + ": conditioning must be [B," +
                         std::to_string(cond_channels) + ",H,W], got " + shape_str(u.shape()));
    }
    if (u.dim(0) != h.dim(0) || u.dim(2) != h.dim(2) || u.dim(3) != h.dim(3)) {
        throw ShapeError(std::string(who) + ": conditioning must match the activation spatially");
    }
}

}  // namespace

AffineCoupling::AffineCoupling(int64_t channels, int64_t cond_channels, int64_t hidden, Rng& rng)
    : channels_(channels),
      cond_channels_(cond_channels),
      net_(channels / 2 + cond_channels, hidden, channels - channels / 2, rng) {
    if (channels % 2 != 0) {
        throw ConfigError("affine coupling: channel count must be even, got " + std::to_string(channels));
    }
}

Tensor AffineCoupling::forward(const Tensor& h, const Tensor& u, Tensor& logdet) const {
    if (h.ndim() != 4 || h.dim(1) != channels_) {
        throw ShapeError("affine coupling: expected " + std::to_string(channels_) + " channels");
    }
    check_cond(h, u, cond_channels_, "affine coupling");
    int64_t ca = channels_ / 2;
    Tensor h_a = ops::slice_channels(h, 0, ca);
    Tensor h_b = ops::slice_channels(h, ca, channels_);
    Tensor net_in = cond_channels_ > 0 ? ops::concat_channels(h_a, u) : h_a;
    auto [raw_s, shift] = net_.heads(net_in);
    Tensor s = soft_clamp(raw_s);
    Tensor h_b2 = ops::add(ops::mul(ops::exp(s), h_b), shift);
    logdet = ops::add(logdet, ops::sum_per_batch(s));
    return ops::concat_channels(h_a, h_b2);
}

Tensor AffineCoupling::inverse(const Tensor& h, const Tensor& u) const {
    if (h.ndim() != 4 || h.dim(1) != channels_) {
        throw ShapeError("affine coupling: expected " + std::to_string(channels_) + " channels");
    }
    check_cond(h, u, cond_channels_, "affine coupling");
    int64_t ca = channels_ / 2;
    Tensor h_a = ops::slice_channels(h, 0, ca);
    Tensor h_b2 = ops::slice_channels(h, ca, channels_);
    Tensor net_in = cond_channels_ > 0 ? ops::concat_channels(h_a, u) : h_a;
    auto [raw_s, shift] = net_.heads(net_in);
    Tensor s = soft_clamp(raw_s);
    Tensor h_b = ops::mul(ops::exp(ops::neg(s)), ops::sub(h_b2, shift));
    return ops::concat_channels(h_a, h_b);
}

void AffineCoupling::visit_params(const std::string& prefix, const ParamVisitor& fn) {
    net_.visit_params(prefix + "net.", fn);
}

// ---- AffineInjector ----

AffineInjector::AffineInjector(int64_t channels, int64_t cond_channels, int64_t hidden, Rng& rng)
    : channels_(channels), net_(cond_channels, hidden, channels, rng) {
    if (cond_channels < 1) {
        throw ConfigError("affine injector: needs conditioning features (cond_channels >= 1)");
    }
}

Tensor AffineInjector::forward(const Tensor& h, const Tensor& u, Tensor& logdet) const {
    if (h.ndim() != 4 || h.dim(1) != channels_) {
        throw ShapeError("affine injector: expected " + std::to_string(channels_) + " channels");
    }
    check_cond(h, u, net_.in_channels(), "affine injector");
    auto [raw_s, shift] = net_.heads(u);
    Tensor s = soft_clamp(raw_s);
    Tensor out = ops::add(ops::mul(ops::exp(s), h), shift);
    logdet = ops::add(logdet, ops::sum_per_batch(s));
    return out;
}

Tensor AffineInjector::inverse(const Tensor& h, const Tensor& u) const {
    if (h.ndim() != 4 || h.dim(1) != channels_) {
        throw ShapeError("affine injector: expected " + std::to_string(channels_) + " channels");
    }
    check_cond(h, u, net_.in_channels(), "affine injector");
    auto [raw_s, shift] = net_.heads(u);
    Tensor s = soft_clamp(raw_s);
    return ops::mul(ops::exp(ops::neg(s)), ops::sub(h, shift));
}

void AffineInjector::visit_params(const std::string& prefix, const ParamVisitor& fn) {
    net_.visit_params(prefix + "net.", fn);
}

}  // namespace flowsr
