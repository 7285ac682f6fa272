#include "flowsr/flow_model.hpp"

#include <cmath>

#include "flowsr/errors.hpp"
#include "flowsr/ops.hpp"
#include "flowsr/tape.hpp"

namespace flowsr {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}

void ArchConfig::validate() const {
    if (levels < 1) throw ConfigError("arch: levels must be >= 1");
    if (steps_per_level < 0) throw ConfigError("arch: steps_per_level must be >= 0");
    if (transitional_steps < 0) throw ConfigError("arch: transitional_steps must be >= 0");
    if (hidden < 1) throw ConfigError("arch: hidden width must be >= 1");
    if (scale_factor != 4 && scale_factor != 8) {
        throw ConfigError("arch: scale_factor must be 4 or 8, got " + std::to_string(scale_factor));
    }
    if (hr_channels < 1) throw ConfigError("arch: hr_channels must be >= 1");
    if (cond_channels < 0) throw ConfigError("arch: cond_channels must be >= 0");
    if (!use_squeeze && levels > 1) {
        throw ConfigError("arch: multi-level models need squeeze (splits halve the channels)");
    }
}

double bits_per_dim(double nll_nats, int64_t dims) {
    return nll_nats / (static_cast<double>(dims) * std::log(2.0));
}

FlowStep::FlowStep(int64_t channels, int64_t cond_channels, int64_t hidden, bool with_injector,
                   Rng& rng)
    : actnorm(channels),
      mix(channels, rng),
      injector(),
      coupling(channels, cond_channels, hidden, rng) {
    if (with_injector) injector.emplace(channels, cond_channels, hidden, rng);
}

FlowModel::FlowModel(ArchConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int64_t ch = cfg_.hr_channels;
    for (int64_t l = 0; l < cfg_.levels; ++l) {
        if (cfg_.use_squeeze) ch *= 4;
        Level level;
        level.channels = ch;
        if (ch % 2 != 0) {
            throw ConfigError("arch: flow-steps need an even channel count, got " +
                              std::to_string(ch) + " at level " + std::to_string(l));
        }
        if (cfg_.use_transitional_steps) {
            for (int64_t t = 0; t < cfg_.transitional_steps; ++t) {
                level.transitional.emplace_back(ch, /*cond=*/0, cfg_.hidden, /*injector=*/false,
                                                rng);
            }
        }
        bool with_injector = cfg_.use_affine_injector && cfg_.conditional();
        for (int64_t k = 0; k < cfg_.steps_per_level; ++k) {
            level.steps.emplace_back(ch, cfg_.cond_channels, cfg_.hidden, with_injector, rng);
        }
        levels_.push_back(std::move(level));
        if (l + 1 < cfg_.levels) {
            if (ch % 2 != 0) throw ConfigError("arch: split needs an even channel count");
            ch /= 2;
        }
    }
}

void FlowModel::check_hr(const Tensor& y) const {
    if (y.ndim() != 4 || y.dim(1) != cfg_.hr_channels) {
        throw ShapeError("flow: expected [B," + std::to_string(cfg_.hr_channels) +
                         ",H,W] input, got " + shape_str(y.shape()));
    }
    if (cfg_.use_squeeze) {
        int64_t div = int64_t{1} << cfg_.levels;
        if (y.dim(2) % div != 0 || y.dim(3) % div != 0) {
            throw ShapeError("flow: spatial size must divide by 2^levels = " + std::to_string(div) +
                             ", got " + shape_str(y.shape()));
        }
    }
}

void FlowModel::check_cond_features(const Tensor& u, int64_t batch) const {
    if (!cfg_.conditional()) return;
    if (!u.defined() || u.ndim() != 4 || u.dim(1) != cfg_.cond_channels) {
        throw ShapeError("flow: conditioning features must be [B," +
                         std::to_string(cfg_.cond_channels) + ",h,w]");
    }
    if (u.dim(0) != batch) throw ShapeError("flow: conditioning batch mismatch");
}

namespace {

// Appends (name, logdet delta per batch element) to the stats record.
void note_layer(EncodeStats* stats, const std::string& name, const Tensor& before,
                const Tensor& after) {
    if (!stats) return;
    EncodeStats::Entry e;
    e.name = name;
    e.logdet.resize(after.vec().size());
    for (size_t i = 0; i < e.logdet.size(); ++i) e.logdet[i] = after.vec()[i] - before.vec()[i];
    stats->layers.push_back(std::move(e));
}

}  // namespace

EncodeResult FlowModel::encode_impl(const Tensor& y, const Tensor& u, bool init_actnorms,
                                    EncodeStats* stats) const {
    check_hr(y);
    int64_t batch = y.dim(0);
    check_cond_features(u, batch);

    Tensor h = y;
    Tensor logdet({batch}, 0.0);
    Tensor prior({batch}, 0.0);
    EncodeResult res;

    for (size_t l = 0; l < levels_.size(); ++l) {
        const Level& level = levels_[l];
        std::string lp = "level" + std::to_string(l) + ".";
        if (cfg_.use_squeeze) h = ops::squeeze2x2(h);

        Tensor u_level;
        if (cfg_.conditional()) {
            u_level = ops::resize_bilinear(u, h.dim(2), h.dim(3));
        }

        auto run_step = [&](const FlowStep& step, const std::string& sp, bool conditional) {
            Tensor before = logdet;
            // Data-dependent init is the one mutation behind this const
            // path; only the non-const init_actnorm() entry enables it.
            if (init_actnorms && !step.actnorm.initialized())
                const_cast<ActNorm&>(step.actnorm).init_from(h);
            h = step.actnorm.forward(h, logdet);
            note_layer(stats, sp + "actnorm", before, logdet);
            before = logdet;
            h = step.mix.forward(h, logdet);
            note_layer(stats, sp + "1x1", before, logdet);
            if (step.injector) {
                before = logdet;
                h = step.injector->forward(h, u_level, logdet);
                note_layer(stats, sp + "injector", before, logdet);
            }
            before = logdet;
            h = step.coupling.forward(h, conditional ? u_level : Tensor(), logdet);
            note_layer(stats, sp + "coupling", before, logdet);
        };

        for (size_t t = 0; t < level.transitional.size(); ++t) {
            run_step(level.transitional[t], lp + "tstep" + std::to_string(t) + ".", false);
        }
        for (size_t k = 0; k < level.steps.size(); ++k) {
            run_step(level.steps[k], lp + "step" + std::to_string(k) + ".", cfg_.conditional());
        }

        Tensor z_level;
        if (l + 1 < levels_.size()) {
            int64_t c = h.dim(1);
            z_level = ops::slice_channels(h, c / 2, c);
            h = ops::slice_channels(h, 0, c / 2);
        } else {
            z_level = h;
        }
        res.z.push_back(z_level);
        int64_t per_sample = z_level.numel() / batch;
        Tensor zsq = ops::scale(ops::sum_per_batch(ops::mul(z_level, z_level)), 0.5);
        prior = ops::add(prior, ops::add_scalar(zsq, 0.5 * kLog2Pi * static_cast<double>(per_sample)));
    }

    res.logdet = logdet;
    res.prior_nll = prior;
    res.nll = ops::sub(prior, logdet);
    return res;
}

EncodeResult FlowModel::encode(const Tensor& y, const Tensor& u, EncodeStats* stats) const {
    return encode_impl(y, u, false, stats);
}

Tensor FlowModel::log_density(const Tensor& y, const Tensor& u) const {
    EncodeResult r = encode(y, u);
    return ops::neg(r.nll);
}

void FlowModel::init_actnorm(const Tensor& y, const Tensor& u) {
    NoGradGuard guard;
    encode_impl(y, u, true, nullptr);
}

bool FlowModel::actnorm_initialized() const {
    for (const Level& level : levels_) {
        for (const FlowStep& s : level.transitional) {
            if (!s.actnorm.initialized()) return false;
        }
        for (const FlowStep& s : level.steps) {
            if (!s.actnorm.initialized()) return false;
        }
    }
    return true;
}

void FlowModel::mark_actnorm_initialized() {
    for (Level& level : levels_) {
        for (FlowStep& s : level.transitional) s.actnorm.mark_initialized(true);
        for (FlowStep& s : level.steps) s.actnorm.mark_initialized(true);
    }
}

std::vector<std::vector<int64_t>> FlowModel::latent_shapes(int64_t batch, int64_t hr_h,
                                                           int64_t hr_w) const {
    std::vector<std::vector<int64_t>> shapes;
    int64_t ch = cfg_.hr_channels, hh = hr_h, ww = hr_w;
    for (int64_t l = 0; l < cfg_.levels; ++l) {
        if (cfg_.use_squeeze) {
            if (hh % 2 != 0 || ww % 2 != 0) throw ShapeError("flow: HR size not squeezable");
            ch *= 4;
            hh /= 2;
            ww /= 2;
        }
        if (l + 1 < cfg_.levels) {
            shapes.push_back({batch, ch / 2, hh, ww});
            ch /= 2;
        } else {
            shapes.push_back({batch, ch, hh, ww});
        }
    }
    return shapes;
}

Tensor FlowModel::decode(const std::vector<Tensor>& z, const Tensor& u) const {
    NoGradGuard guard;
    if (z.size() != levels_.size()) {
        throw ShapeError("decode: expected " + std::to_string(levels_.size()) +
                         " latent tensors, got " + std::to_string(z.size()));
    }
    const Tensor& z_last = z.back();
    if (z_last.ndim() != 4) throw ShapeError("decode: latents must be [B,C,H,W]");
    int64_t batch = z_last.dim(0);
    // reconstruct the HR size implied by the coarsest latent and verify
    // the whole stack against it
    int64_t hr_h = z_last.dim(2), hr_w = z_last.dim(3);
    if (cfg_.use_squeeze) {
        hr_h <<= cfg_.levels;
        hr_w <<= cfg_.levels;
    }
    auto expected = latent_shapes(batch, hr_h, hr_w);
    for (size_t l = 0; l < z.size(); ++l) {
        if (z[l].shape() != expected[l]) {
            throw ShapeError("decode: latent " + std::to_string(l) + " has shape " +
                             shape_str(z[l].shape()) + ", expected " + shape_str(expected[l]));
        }
    }
    check_cond_features(u, batch);

    Tensor h = z_last;
    for (int64_t l = static_cast<int64_t>(levels_.size()) - 1; l >= 0; --l) {
        const Level& level = levels_[static_cast<size_t>(l)];
        if (static_cast<size_t>(l + 1) < levels_.size()) {
            h = ops::concat_channels(h, z[static_cast<size_t>(l)]);
        }
        Tensor u_level;
        if (cfg_.conditional()) {
            u_level = ops::resize_bilinear(u, h.dim(2), h.dim(3));
        }
        for (auto it = level.steps.rbegin(); it != level.steps.rend(); ++it) {
            h = it->coupling.inverse(h, cfg_.conditional() ? u_level : Tensor());
            if (it->injector) h = it->injector->inverse(h, u_level);
            h = it->mix.inverse(h);
            h = it->actnorm.inverse(h);
        }
        for (auto it = level.transitional.rbegin(); it != level.transitional.rend(); ++it) {
            h = it->coupling.inverse(h, Tensor());
            h = it->mix.inverse(h);
            h = it->actnorm.inverse(h);
        }
        if (cfg_.use_squeeze) h = ops::unsqueeze2x2(h);
    }
    return h;
}

std::vector<Tensor> FlowModel::draw_latents(int64_t batch, int64_t hr_h, int64_t hr_w, double tau,
                                            Rng& rng) const {
    if (tau < 0.0) throw DomainError("sample: temperature must be >= 0");
    std::vector<Tensor> z;
    for (auto& shape : latent_shapes(batch, hr_h, hr_w)) {
        z.push_back(gauss_sample(rng, shape, tau));
    }
    return z;
}

Tensor FlowModel::sample(const Tensor& u, double tau, Rng& rng) const {
    if (!cfg_.conditional()) {
        throw UsageError("sample(u, tau): unconditional models need explicit latent shapes; "
                         "use draw_latents + decode");
    }
    if (!u.defined() || u.ndim() != 4) throw ShapeError("sample: conditioning features required");
    int64_t hr_h = u.dim(2) * cfg_.scale_factor;
    int64_t hr_w = u.dim(3) * cfg_.scale_factor;
    std::vector<Tensor> z = draw_latents(u.dim(0), hr_h, hr_w, tau, rng);
    return decode(z, u);
}

void FlowModel::visit_params(const ParamVisitor& fn) {
    for (size_t l = 0; l < levels_.size(); ++l) {
        std::string lp = "level" + std::to_string(l) + ".";
        for (size_t t = 0; t < levels_[l].transitional.size(); ++t) {
            std::string sp = lp + "tstep" + std::to_string(t) + ".";
            FlowStep& s = levels_[l].transitional[t];
            s.actnorm.visit_params(sp + "actnorm.", fn);
            s.mix.visit_params(sp + "1x1.", fn);
            s.coupling.visit_params(sp + "coupling.", fn);
        }
        for (size_t k = 0; k < levels_[l].steps.size(); ++k) {
            std::string sp = lp + "step" + std::to_string(k) + ".";
            FlowStep& s = levels_[l].steps[k];
            s.actnorm.visit_params(sp + "actnorm.", fn);
            s.mix.visit_params(sp + "1x1.", fn);
            if (s.injector) s.injector->visit_params(sp + "injector.", fn);
            s.coupling.visit_params(sp + "coupling.", fn);
        }
    }
}

int64_t FlowModel::num_params() {
    int64_t n = 0;
    visit_params([&](const std::string&, Tensor& t) { n += t.numel(); });
    return n;
}

std::vector<std::string> FlowModel::layer_names() const {
    std::vector<std::string> names;
    for (size_t l = 0; l < levels_.size(); ++l) {
        std::string lp = "level" + std::to_string(l) + ".";
        if (cfg_.use_squeeze) names.push_back(lp + "squeeze");
        for (size_t t = 0; t < levels_[l].transitional.size(); ++t) {
            names.push_back(lp + "tstep" + std::to_string(t) +
                            "[actnorm,1x1,coupling]");
        }
        for (size_t k = 0; k < levels_[l].steps.size(); ++k) {
            bool inj = levels_[l].steps[k].injector.has_value();
            names.push_back(lp + "step" + std::to_string(k) +
                            (inj ? "[actnorm,1x1,injector,coupling]" : "[actnorm,1x1,coupling]"));
        }
        if (l + 1 < levels_.size()) names.push_back(lp + "split");
    }
    return names;
}

}  // namespace flowsr
