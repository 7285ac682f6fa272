#include "flowsr/ops.hpp"

#include <algorithm>
#include <cmath>

#include "flowsr/errors.hpp"
#include "flowsr/linalg.hpp"

namespace flowsr {
namespace ops {

namespace {

bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void check_4d(const Tensor& t, const char* op) {
    if (t.ndim() != 4) {
        throw ShapeError(std::string(op) + ": expected a [B,C,H,W] tensor, got " + shape_str(t.shape()));
    }
}

size_t usz(int64_t v) { return static_cast<size_t>(v); }

// Shared skeleton for elementwise unary ops: y_i = f(x_i), with the
// backward closure receiving (x_i, y_i, gy_i) and returning dL/dx_i.
template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd f, Bwd df) {
    Tensor out(a.shape());
    const auto& av = a.vec();
    auto& ov = out.vec();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, df]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            const auto& av2 = a.vec();
            const auto& ov2 = out.vec();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += df(av2[i], ov2[i]) * (*gy)[i];
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const auto& av = a.vec();
    const auto& bv = b.vec();
    auto& ov = out.vec();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, b, out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            if (a.requires_grad()) {
                auto& ga = tape->grad_buf(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*gy)[i];
            }
            if (b.requires_grad()) {
                auto& gb = tape->grad_buf(b);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*gy)[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const auto& av = a.vec();
    const auto& bv = b.vec();
    auto& ov = out.vec();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, b, out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            if (a.requires_grad()) {
                auto& ga = tape->grad_buf(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*gy)[i];
            }
            if (b.requires_grad()) {
                auto& gb = tape->grad_buf(b);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] -= (*gy)[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const auto& av = a.vec();
    const auto& bv = b.vec();
    auto& ov = out.vec();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, b, out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            const auto& av2 = a.vec();
            const auto& bv2 = b.vec();
            if (a.requires_grad()) {
                auto& ga = tape->grad_buf(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += bv2[i] * (*gy)[i];
            }
            if (b.requires_grad()) {
                auto& gb = tape->grad_buf(b);
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += av2[i] * (*gy)[i];
            }
        });
    }
    return out;
}

Tensor neg(const Tensor& a) {
    return unary_op(
        a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.vec()) {
        if (v <= 0.0) throw DomainError("log: non-positive input");
    }
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor log_abs(const Tensor& a) {
    for (double v : a.vec()) {
        if (v == 0.0) throw DomainError("log_abs: zero input");
    }
    return unary_op(
        a, [](double x) { return std::log(std::fabs(x)); },
        [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

Tensor add_bcast(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("add_bcast: broadcast operand must have one element");
    double sv = s.vec()[0];
    Tensor out(a.shape());
    const auto& av = a.vec();
    auto& ov = out.vec();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + sv;
    if (want_grad({&a, &s})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, s, out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            if (a.requires_grad()) {
                auto& ga = tape->grad_buf(a);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*gy)[i];
            }
            if (s.requires_grad()) {
                auto& gs = tape->grad_buf(s);
                double acc = 0.0;
                for (double g : *gy) acc += g;
                gs[0] += acc;
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.vec()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*gy)[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.vec()) acc += v;
    double n = static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(acc / n);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, n]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            double g = (*gy)[0] / n;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor var(const Tensor& a) {
    int64_t n = a.numel();
    if (n < 2) throw DomainError("var: need at least two elements");
    const auto& av = a.vec();
    double mu = 0.0;
    for (double v : av) mu += v;
    mu /= static_cast<double>(n);
    double acc = 0.0;
    for (double v : av) acc += (v - mu) * (v - mu);
    double denom = static_cast<double>(n - 1);
    Tensor out = Tensor::scalar(acc / denom);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, mu, denom]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            const auto& av2 = a.vec();
            double g = 2.0 * (*gy)[0] / denom;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av2[i] - mu);
        });
    }
    return out;
}

Tensor sum_per_batch(const Tensor& a) {
    check_4d(a, "sum_per_batch");
    int64_t batch = a.dim(0);
    int64_t per = a.numel() / batch;
    Tensor out({batch});
    const double* av = a.data();
    for (int64_t b = 0; b < batch; ++b) {
        double acc = 0.0;
        const double* p = av + b * per;
        for (int64_t i = 0; i < per; ++i) acc += p[i];
        out.vec()[usz(b)] = acc;
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, batch, per]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            for (int64_t b = 0; b < batch; ++b) {
                double g = (*gy)[usz(b)];
                double* p = ga.data() + b * per;
                for (int64_t i = 0; i < per; ++i) p[i] += g;
            }
        });
    }
    return out;
}

Tensor channel_scale(const Tensor& h, const Tensor& s) {
    check_4d(h, "channel_scale");
    if (s.ndim() != 1 || s.dim(0) != h.dim(1)) {
        throw ShapeError("channel_scale: scale must be [C] matching the input channels");
    }
    int64_t batch = h.dim(0), ch = h.dim(1), plane = h.dim(2) * h.dim(3);
    Tensor out(h.shape());
    const double* hv = h.data();
    const double* sv = s.data();
    double* ov = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < ch; ++c) {
            double sc = sv[c];
            const double* src = hv + (b * ch + c) * plane;
            double* dst = ov + (b * ch + c) * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = sc * src[i];
        }
    }
    if (want_grad({&h, &s})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, h, s, out, batch, ch, plane]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            const double* hv2 = h.data();
            const double* sv2 = s.data();
            if (h.requires_grad()) {
                auto& gh = tape->grad_buf(h);
                for (int64_t b = 0; b < batch; ++b) {
                    for (int64_t c = 0; c < ch; ++c) {
                        double sc = sv2[c];
                        const double* g = gy->data() + (b * ch + c) * plane;
                        double* dst = gh.data() + (b * ch + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) dst[i] += sc * g[i];
                    }
                }
            }
            if (s.requires_grad()) {
                auto& gs = tape->grad_buf(s);
                for (int64_t b = 0; b < batch; ++b) {
                    for (int64_t c = 0; c < ch; ++c) {
                        const double* g = gy->data() + (b * ch + c) * plane;
                        const double* src = hv2 + (b * ch + c) * plane;
                        double acc = 0.0;
                        for (int64_t i = 0; i < plane; ++i) acc += g[i] * src[i];
                        gs[usz(c)] += acc;
                    }
                }
            }
        });
    }
    return out;
}

Tensor channel_shift(const Tensor& h, const Tensor& b) {
    check_4d(h, "channel_shift");
    if (b.ndim() != 1 || b.dim(0) != h.dim(1)) {
        throw ShapeError("channel_shift: shift must be [C] matching the input channels");
    }
    int64_t batch = h.dim(0), ch = h.dim(1), plane = h.dim(2) * h.dim(3);
    Tensor out(h.shape());
    const double* hv = h.data();
    const double* bv = b.data();
    double* ov = out.data();
    for (int64_t n = 0; n < batch; ++n) {
        for (int64_t c = 0; c < ch; ++c) {
            double sh = bv[c];
            const double* src = hv + (n * ch + c) * plane;
            double* dst = ov + (n * ch + c) * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + sh;
        }
    }
    if (want_grad({&h, &b})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, h, b, out, batch, ch, plane]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            if (h.requires_grad()) {
                auto& gh = tape->grad_buf(h);
                for (size_t i = 0; i < gh.size(); ++i) gh[i] += (*gy)[i];
            }
            if (b.requires_grad()) {
                auto& gb = tape->grad_buf(b);
                for (int64_t n = 0; n < batch; ++n) {
                    for (int64_t c = 0; c < ch; ++c) {
                        const double* g = gy->data() + (n * ch + c) * plane;
                        double acc = 0.0;
                        for (int64_t i = 0; i < plane; ++i) acc += g[i];
                        gb[usz(c)] += acc;
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    for (const Tensor& p : parts) check_4d(p, "concat_channels");
    int64_t batch = parts[0].dim(0), hh = parts[0].dim(2), ww = parts[0].dim(3);
    int64_t ch_total = 0;
    for (const Tensor& p : parts) {
        if (p.dim(0) != batch || p.dim(2) != hh || p.dim(3) != ww) {
            throw ShapeError("concat_channels: inputs disagree outside the channel axis");
        }
        ch_total += p.dim(1);
    }
    Tensor out({batch, ch_total, hh, ww});
    int64_t plane = hh * ww;
    double* ov = out.data();
    std::vector<int64_t> offsets;  // channel offset of each part
    int64_t c_off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(c_off);
        int64_t pc = p.dim(1);
        const double* pv = p.data();
        for (int64_t b = 0; b < batch; ++b) {
            std::copy(pv + b * pc * plane, pv + (b + 1) * pc * plane,
                      ov + (b * ch_total + c_off) * plane);
        }
        c_off += pc;
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (grad_recording() && any) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, parts, offsets, out, batch, ch_total, plane]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            for (size_t k = 0; k < parts.size(); ++k) {
                if (!parts[k].requires_grad()) continue;
                auto& gp = tape->grad_buf(parts[k]);
                int64_t pc = parts[k].dim(1);
                int64_t c_off2 = offsets[k];
                for (int64_t b = 0; b < batch; ++b) {
                    const double* g = gy->data() + (b * ch_total + c_off2) * plane;
                    double* dst = gp.data() + b * pc * plane;
                    for (int64_t i = 0; i < pc * plane; ++i) dst[i] += g[i];
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    return concat_channels(std::vector<Tensor>{a, b});
}

Tensor slice_channels(const Tensor& a, int64_t c0, int64_t c1) {
    check_4d(a, "slice_channels");
    int64_t ch = a.dim(1);
    if (c0 < 0 || c1 <= c0 || c1 > ch) throw ShapeError("slice_channels: bad channel range");
    int64_t batch = a.dim(0), plane = a.dim(2) * a.dim(3);
    int64_t cw = c1 - c0;
    Tensor out({batch, cw, a.dim(2), a.dim(3)});
    const double* av = a.data();
    double* ov = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        std::copy(av + (b * ch + c0) * plane, av + (b * ch + c1) * plane, ov + b * cw * plane);
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, c0, cw, ch, batch, plane]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            for (int64_t b = 0; b < batch; ++b) {
                const double* g = gy->data() + b * cw * plane;
                double* dst = ga.data() + (b * ch + c0) * plane;
                for (int64_t i = 0; i < cw * plane; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

namespace {

// [B,C,H,W] <-> [B,4C,H/2,W/2] data movement. Channel 4c+k of the small
// layout holds position k of each 2x2 cell of big channel c (row-major
// cell order: top-left, top-right, bottom-left, bottom-right).

void squeeze_gather(const double* big, double* small, int64_t batch, int64_t ch, int64_t hh,
                    int64_t ww) {
    int64_t h2 = hh / 2, w2 = ww / 2;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < ch; ++c) {
            for (int64_t k = 0; k < 4; ++k) {
                int64_t dy = k / 2, dx = k % 2;
                for (int64_t y = 0; y < h2; ++y) {
                    double* srow = small + ((b * (4 * ch) + 4 * c + k) * h2 + y) * w2;
                    const double* brow = big + ((b * ch + c) * hh + 2 * y + dy) * ww + dx;
                    for (int64_t x = 0; x < w2; ++x) srow[x] = brow[2 * x];
                }
            }
        }
    }
}

void squeeze_scatter_add(const double* small, double* big, int64_t batch, int64_t ch, int64_t hh,
                         int64_t ww) {
    int64_t h2 = hh / 2, w2 = ww / 2;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < ch; ++c) {
            for (int64_t k = 0; k < 4; ++k) {
                int64_t dy = k / 2, dx = k % 2;
                for (int64_t y = 0; y < h2; ++y) {
                    const double* srow = small + ((b * (4 * ch) + 4 * c + k) * h2 + y) * w2;
                    double* brow = big + ((b * ch + c) * hh + 2 * y + dy) * ww + dx;
                    for (int64_t x = 0; x < w2; ++x) brow[2 * x] += srow[x];
                }
            }
        }
    }
}

}  // namespace

Tensor squeeze2x2(const Tensor& a) {
    check_4d(a, "squeeze2x2");
    int64_t batch = a.dim(0), ch = a.dim(1), hh = a.dim(2), ww = a.dim(3);
    if (hh % 2 != 0 || ww % 2 != 0) {
        throw ShapeError("squeeze2x2: spatial dims must be even, got " + shape_str(a.shape()));
    }
    Tensor out({batch, 4 * ch, hh / 2, ww / 2});
    squeeze_gather(a.data(), out.data(), batch, ch, hh, ww);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, batch, ch, hh, ww]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            squeeze_scatter_add(gy->data(), ga.data(), batch, ch, hh, ww);
        });
    }
    return out;
}

Tensor unsqueeze2x2(const Tensor& a) {
    check_4d(a, "unsqueeze2x2");
    int64_t batch = a.dim(0), ch4 = a.dim(1), h2 = a.dim(2), w2 = a.dim(3);
    if (ch4 % 4 != 0) {
        throw ShapeError("unsqueeze2x2: channels must divide by 4, got " + shape_str(a.shape()));
    }
    int64_t ch = ch4 / 4, hh = 2 * h2, ww = 2 * w2;
    Tensor out({batch, ch, hh, ww});
    squeeze_scatter_add(a.data(), out.data(), batch, ch, hh, ww);
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, batch, ch, hh, ww]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            std::vector<double> tmp(ga.size());
            squeeze_gather(gy->data(), tmp.data(), batch, ch, hh, ww);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += tmp[i];
        });
    }
    return out;
}

namespace {

struct ResizeAxis {
    std::vector<int64_t> i0, i1;
    std::vector<double> w1;  // weight of the i1 tap; i0 gets 1 - w1
};

ResizeAxis make_axis(int64_t n_in, int64_t n_out) {
    ResizeAxis ax;
    ax.i0.resize(usz(n_out));
    ax.i1.resize(usz(n_out));
    ax.w1.resize(usz(n_out));
    double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (int64_t i = 0; i < n_out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        double f = std::floor(src);
        double w = src - f;
        int64_t a0 = static_cast<int64_t>(f);
        int64_t a1 = a0 + 1;
        ax.i0[usz(i)] = std::clamp<int64_t>(a0, 0, n_in - 1);
        ax.i1[usz(i)] = std::clamp<int64_t>(a1, 0, n_in - 1);
        ax.w1[usz(i)] = w;
    }
    return ax;
}

}  // namespace

Tensor resize_bilinear(const Tensor& a, int64_t h_out, int64_t w_out) {
    check_4d(a, "resize_bilinear");
    if (h_out < 1 || w_out < 1) throw ShapeError("resize_bilinear: output dims must be positive");
    int64_t batch = a.dim(0), ch = a.dim(1), h_in = a.dim(2), w_in = a.dim(3);
    ResizeAxis ay = make_axis(h_in, h_out);
    ResizeAxis axx = make_axis(w_in, w_out);
    Tensor out({batch, ch, h_out, w_out});
    const double* av = a.data();
    double* ov = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < ch; ++c) {
            const double* plane = av + (b * ch + c) * h_in * w_in;
            double* oplane = ov + (b * ch + c) * h_out * w_out;
            for (int64_t y = 0; y < h_out; ++y) {
                const double* r0 = plane + ay.i0[usz(y)] * w_in;
                const double* r1 = plane + ay.i1[usz(y)] * w_in;
                double wy = ay.w1[usz(y)];
                double* orow = oplane + y * w_out;
                for (int64_t x = 0; x < w_out; ++x) {
                    int64_t x0 = axx.i0[usz(x)], x1 = axx.i1[usz(x)];
                    double wx = axx.w1[usz(x)];
                    double top = (1.0 - wx) * r0[x0] + wx * r0[x1];
                    double bot = (1.0 - wx) * r1[x0] + wx * r1[x1];
                    orow[x] = (1.0 - wy) * top + wy * bot;
                }
            }
        }
    }
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, a, out, ay, axx, batch, ch, h_in, w_in, h_out, w_out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& ga = tape->grad_buf(a);
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t c = 0; c < ch; ++c) {
                    double* gplane = ga.data() + (b * ch + c) * h_in * w_in;
                    const double* gout = gy->data() + (b * ch + c) * h_out * w_out;
                    for (int64_t y = 0; y < h_out; ++y) {
                        double* g0 = gplane + ay.i0[usz(y)] * w_in;
                        double* g1 = gplane + ay.i1[usz(y)] * w_in;
                        double wy = ay.w1[usz(y)];
                        const double* grow = gout + y * w_out;
                        for (int64_t x = 0; x < w_out; ++x) {
                            int64_t x0 = axx.i0[usz(x)], x1 = axx.i1[usz(x)];
                            double wx = axx.w1[usz(x)];
                            double g = grow[x];
                            g0[x0] += (1.0 - wy) * (1.0 - wx) * g;
                            g0[x1] += (1.0 - wy) * wx * g;
                            g1[x0] += wy * (1.0 - wx) * g;
                            g1[x1] += wy * wx * g;
                        }
                    }
                }
            }
        });
    }
    return out;
}

namespace {

// The convolution paths below are GEMM-shaped: one batch item's input is
// unrolled into a [c_in*kh*kw, h_out*w_out] patch matrix (im2col) whose
// columns are contiguous, so forward, weight-grad and input-grad all
// reduce to long axpy/dot inner loops the compiler vectorizes.

// Row r = (ci*kh + ky)*kw + kx of `col` holds input channel ci shifted by
// (ky-p, kx-p), zero where the shift leaves the image.
void im2col(const double* img, int64_t c_in, int64_t h_in, int64_t w_in, int64_t kh, int64_t kw,
            int64_t p, int64_t h_out, int64_t w_out, double* col) {
    for (int64_t ci = 0; ci < c_in; ++ci) {
        const double* iimg = img + ci * h_in * w_in;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                double* row = col + ((ci * kh + ky) * kw + kx) * h_out * w_out;
                int64_t x0 = std::max<int64_t>(0, p - kx);
                int64_t x1 = std::min<int64_t>(w_out, w_in + p - kx);
                for (int64_t y = 0; y < h_out; ++y) {
                    double* dst = row + y * w_out;
                    int64_t yi = y + ky - p;
                    if (yi < 0 || yi >= h_in) {
                        std::fill(dst, dst + w_out, 0.0);
                        continue;
                    }
                    if (x0 > 0) std::fill(dst, dst + x0, 0.0);
                    if (x1 < w_out) std::fill(dst + x1, dst + w_out, 0.0);
                    const double* src = iimg + yi * w_in + x0 + kx - p;
                    std::copy(src, src + (x1 - x0), dst + x0);
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds the patch-matrix rows back into an
// image-shaped gradient.
void col2im_accum(const double* col, int64_t c_in, int64_t h_in, int64_t w_in, int64_t kh,
                  int64_t kw, int64_t p, int64_t h_out, int64_t w_out, double* img) {
    for (int64_t ci = 0; ci < c_in; ++ci) {
        double* iimg = img + ci * h_in * w_in;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const double* row = col + ((ci * kh + ky) * kw + kx) * h_out * w_out;
                int64_t x0 = std::max<int64_t>(0, p - kx);
                int64_t x1 = std::min<int64_t>(w_out, w_in + p - kx);
                for (int64_t y = 0; y < h_out; ++y) {
                    int64_t yi = y + ky - p;
                    if (yi < 0 || yi >= h_in) continue;
                    double* dst = iimg + yi * w_in + x0 + kx - p;
                    const double* src = row + y * w_out + x0;
                    for (int64_t x = 0; x < x1 - x0; ++x) dst[x] += src[x];
                }
            }
        }
    }
}

// Per-thread scratch buffers for the GEMM paths, grown on demand.
std::vector<double>& scratch(int which) {
    thread_local std::vector<double> bufs[4];
    return bufs[which];
}

// C[m x n] += A[m x k] * B[k x n], all row-major. The hot tile is written
// with GCC vector extensions: eight 8-wide accumulators (a 4x16 block of
// C) provably live in registers across the whole k loop, which the
// auto-vectorizer would not guarantee. Per output element the summation
// order over k is plain sequential, so results match the scalar tail
// bit for bit.
#if defined(__GNUC__)
typedef double vd8 __attribute__((vector_size(64)));

inline vd8 load8(const double* p) {
    vd8 v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
}

inline void store8(double* p, vd8 v) { __builtin_memcpy(p, &v, sizeof(v)); }

inline vd8 splat8(double x) { return vd8{x, x, x, x, x, x, x, x}; }
#endif

void gemm_accum(const double* __restrict a, const double* __restrict b, double* __restrict c,
                int64_t m, int64_t k, int64_t n) {
    int64_t j0 = 0;
#if defined(__GNUC__)
    constexpr int64_t MR = 4, NR = 16;
    for (; j0 + NR <= n; j0 += NR) {
        int64_t i0 = 0;
        for (; i0 + MR <= m; i0 += MR) {
            vd8 c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
            const double *a0 = a + i0 * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
            const double* bp = b + j0;
            for (int64_t p = 0; p < k; ++p, bp += n) {
                const vd8 b0 = load8(bp), b1 = load8(bp + 8);
                vd8 v = splat8(a0[p]);
                c00 += v * b0;
                c01 += v * b1;
                v = splat8(a1[p]);
                c10 += v * b0;
                c11 += v * b1;
                v = splat8(a2[p]);
                c20 += v * b0;
                c21 += v * b1;
                v = splat8(a3[p]);
                c30 += v * b0;
                c31 += v * b1;
            }
            double* cr = c + i0 * n + j0;
            store8(cr, load8(cr) + c00);
            store8(cr + 8, load8(cr + 8) + c01);
            cr += n;
            store8(cr, load8(cr) + c10);
            store8(cr + 8, load8(cr + 8) + c11);
            cr += n;
            store8(cr, load8(cr) + c20);
            store8(cr + 8, load8(cr + 8) + c21);
            cr += n;
            store8(cr, load8(cr) + c30);
            store8(cr + 8, load8(cr + 8) + c31);
        }
        for (; i0 < m; ++i0) {
            vd8 acc0{}, acc1{};
            const double* a0 = a + i0 * k;
            const double* bp = b + j0;
            for (int64_t p = 0; p < k; ++p, bp += n) {
                const vd8 v = splat8(a0[p]);
                acc0 += v * load8(bp);
                acc1 += v * load8(bp + 8);
            }
            double* cr = c + i0 * n + j0;
            store8(cr, load8(cr) + acc0);
            store8(cr + 8, load8(cr + 8) + acc1);
        }
    }
#endif
    if (j0 < n) {
        for (int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (int64_t j = j0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// dst[j*rows + i] = src[i*cols + j]
void transpose_into(const double* src, int64_t rows, int64_t cols, double* dst) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

void conv_forward_accum(const double* in, const double* w, double* out, int64_t batch,
                        int64_t c_in, int64_t h_in, int64_t w_in, int64_t c_out, int64_t kh,
                        int64_t kw, int64_t p, int64_t h_out, int64_t w_out) {
    const int64_t kdim = c_in * kh * kw, plane = h_out * w_out;
    std::vector<double>& col = scratch(0);
    col.resize(static_cast<size_t>(kdim * plane));
    for (int64_t b = 0; b < batch; ++b) {
        im2col(in + b * c_in * h_in * w_in, c_in, h_in, w_in, kh, kw, p, h_out, w_out, col.data());
        gemm_accum(w, col.data(), out + b * c_out * plane, c_out, kdim, plane);
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int64_t padding) {
    check_4d(input, "conv2d");
    if (weight.ndim() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw]");
    int64_t batch = input.dim(0), c_in = input.dim(1), h_in = input.dim(2), w_in = input.dim(3);
    int64_t c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != c_in) {
        throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, input has " + std::to_string(c_in));
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != c_out)) {
        throw ShapeError("conv2d: bias must be [Cout]");
    }
    if (padding < 0) throw ShapeError("conv2d: negative padding");
    int64_t h_out = h_in + 2 * padding - kh + 1;
    int64_t w_out = w_in + 2 * padding - kw + 1;
    if (h_out < 1 || w_out < 1) throw ShapeError("conv2d: kernel larger than padded input");

    Tensor out({batch, c_out, h_out, w_out});
    if (bias.defined()) {
        double* ov = out.data();
        const double* bv = bias.data();
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t co = 0; co < c_out; ++co) {
                double v = bv[co];
                double* plane = ov + (b * c_out + co) * h_out * w_out;
                std::fill(plane, plane + h_out * w_out, v);
            }
        }
    }
    conv_forward_accum(input.data(), weight.data(), out.data(), batch, c_in, h_in, w_in, c_out,
                       kh, kw, padding, h_out, w_out);

    bool need = grad_recording() && (input.requires_grad() || weight.requires_grad() ||
                                     (bias.defined() && bias.requires_grad()));
    if (need) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, input, weight, bias, out, batch, c_in, h_in, w_in, c_out, kh, kw,
                      padding, h_out, w_out]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            const double* g = gy->data();
            const int64_t kdim = c_in * kh * kw, plane = h_out * w_out;
            if (weight.requires_grad()) {
                // dW = sum_b G_b * COL_b^T, run transposed (COL * G^T) so
                // the one row-major GEMM kernel serves here too.
                auto& gw = tape->grad_buf(weight);
                std::vector<double>& col = scratch(0);
                std::vector<double>& gt = scratch(1);
                std::vector<double>& dwt = scratch(2);
                col.resize(static_cast<size_t>(kdim * plane));
                gt.resize(static_cast<size_t>(c_out * plane));
                dwt.assign(static_cast<size_t>(kdim * c_out), 0.0);
                for (int64_t b = 0; b < batch; ++b) {
                    im2col(input.data() + b * c_in * h_in * w_in, c_in, h_in, w_in, kh, kw,
                           padding, h_out, w_out, col.data());
                    transpose_into(g + b * c_out * plane, c_out, plane, gt.data());
                    gemm_accum(col.data(), gt.data(), dwt.data(), kdim, plane, c_out);
                }
                for (int64_t co = 0; co < c_out; ++co)
                    for (int64_t k = 0; k < kdim; ++k) gw[usz(co * kdim + k)] += dwt[usz(k * c_out + co)];
            }
            if (input.requires_grad()) {
                // dCOL = W^T * G_b, then fold back to image shape.
                auto& gin = tape->grad_buf(input);
                std::vector<double>& wt = scratch(1);
                std::vector<double>& colg = scratch(3);
                wt.resize(static_cast<size_t>(kdim * c_out));
                transpose_into(weight.data(), c_out, kdim, wt.data());
                colg.resize(static_cast<size_t>(kdim * plane));
                for (int64_t b = 0; b < batch; ++b) {
                    std::fill(colg.begin(), colg.end(), 0.0);
                    gemm_accum(wt.data(), g + b * c_out * plane, colg.data(), kdim, c_out, plane);
                    col2im_accum(colg.data(), c_in, h_in, w_in, kh, kw, padding, h_out, w_out,
                                 gin.data() + b * c_in * h_in * w_in);
                }
            }
            if (bias.defined() && bias.requires_grad()) {
                auto& gb = tape->grad_buf(bias);
                for (int64_t b = 0; b < batch; ++b) {
                    for (int64_t co = 0; co < c_out; ++co) {
                        const double* gimg = g + (b * c_out + co) * h_out * w_out;
                        double acc = 0.0;
                        for (int64_t i = 0; i < h_out * w_out; ++i) acc += gimg[i];
                        gb[usz(co)] += acc;
                    }
                }
            }
        });
    }
    return out;
}

Tensor channel_transform(const Tensor& h, const Tensor& w) {
    check_4d(h, "channel_transform");
    int64_t ch = h.dim(1);
    if (w.ndim() != 2 || w.dim(0) != ch || w.dim(1) != ch) {
        throw ShapeError("channel_transform: matrix must be [C,C] with C = input channels");
    }
    int64_t batch = h.dim(0), plane = h.dim(2) * h.dim(3);
    Tensor out(h.shape());
    const double* hv = h.data();
    const double* wv = w.data();
    double* ov = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        const double* hb = hv + b * ch * plane;
        double* ob = ov + b * ch * plane;
        for (int64_t co = 0; co < ch; ++co) {
            double* orow = ob + co * plane;
            for (int64_t ci = 0; ci < ch; ++ci) {
                double m = wv[co * ch + ci];
                if (m == 0.0) continue;
                const double* hrow = hb + ci * plane;
                for (int64_t i = 0; i < plane; ++i) orow[i] += m * hrow[i];
            }
        }
    }
    if (want_grad({&h, &w})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, h, w, out, batch, ch, plane]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            const double* g = gy->data();
            if (h.requires_grad()) {
                auto& gh = tape->grad_buf(h);
                const double* wv2 = w.data();
                for (int64_t b = 0; b < batch; ++b) {
                    const double* gb = g + b * ch * plane;
                    double* hb = gh.data() + b * ch * plane;
                    for (int64_t ci = 0; ci < ch; ++ci) {
                        double* hrow = hb + ci * plane;
                        for (int64_t co = 0; co < ch; ++co) {
                            double m = wv2[co * ch + ci];
                            if (m == 0.0) continue;
                            const double* grow = gb + co * plane;
                            for (int64_t i = 0; i < plane; ++i) hrow[i] += m * grow[i];
                        }
                    }
                }
            }
            if (w.requires_grad()) {
                auto& gw = tape->grad_buf(w);
                const double* hv2 = h.data();
                for (int64_t b = 0; b < batch; ++b) {
                    const double* gb = g + b * ch * plane;
                    const double* hb = hv2 + b * ch * plane;
                    for (int64_t co = 0; co < ch; ++co) {
                        const double* grow = gb + co * plane;
                        for (int64_t ci = 0; ci < ch; ++ci) {
                            const double* hrow = hb + ci * plane;
                            double acc = 0.0;
                            for (int64_t i = 0; i < plane; ++i) acc += grow[i] * hrow[i];
                            gw[usz(co * ch + ci)] += acc;
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor logabsdet(const Tensor& w) {
    if (w.ndim() != 2 || w.dim(0) != w.dim(1)) {
        throw ShapeError("logabsdet: expected a square matrix, got " + shape_str(w.shape()));
    }
    int64_t n = w.dim(0);
    linalg::Lu f = linalg::lu_decompose(w.vec(), n);  // throws SingularError
    Tensor out = Tensor::scalar(f.log_abs_det());
    if (want_grad({&w})) {
        out.set_requires_grad(true);
        Tape* tape = Tape::active();
        tape->record([tape, w, out, n]() {
            const std::vector<double>* gy = tape->grad_if(out);
            if (!gy) return;
            auto& gw = tape->grad_buf(w);
            std::vector<double> inv = linalg::invert(w.vec(), n);
            double g = (*gy)[0];
            // d log|det W| / dW = (W^-1)^T
            for (int64_t i = 0; i < n; ++i) {
                for (int64_t j = 0; j < n; ++j) {
                    gw[usz(i * n + j)] += g * inv[usz(j * n + i)];
                }
            }
        });
    }
    return out;
}

}  // namespace ops
}  // namespace flowsr
