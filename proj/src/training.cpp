#include "flowsr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "flowsr/errors.hpp"
#include "flowsr/metrics.hpp"
#include "flowsr/ops.hpp"
#include "flowsr/optim.hpp"
#include "flowsr/tape.hpp"

namespace flowsr {

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

void CorpusConfig::validate() const {
    kernel.validate();
    if (size < kernel.factor)
        throw ConfigError("corpus: size " + std::to_string(size) + " smaller than scale factor");
    if (size % kernel.factor != 0)
        throw ConfigError("corpus: size " + std::to_string(size) + " not divisible by factor " +
                          std::to_string(kernel.factor));
    if (count < 1) throw ConfigError("corpus: count must be >= 1");
}

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

void fill_gradient(Tensor& img, Rng& rng) {
    const int64_t s = img.dim(2);
    const double theta = 2.0 * 3.14159265358979323846 * rng.uniform();
    const double dx = std::cos(theta), dy = std::sin(theta);
    double c0[3], c1[3];
    for (int ch = 0; ch < 3; ++ch) c0[ch] = rng.uniform();
    for (int ch = 0; ch < 3; ++ch) c1[ch] = rng.uniform();
    // Project onto the direction and normalize to [0,1] over the image.
    double pmin = 0.0, pmax = 0.0;
    for (int corner = 0; corner < 4; ++corner) {
        const double px = (corner & 1) ? double(s - 1) : 0.0;
        const double py = (corner & 2) ? double(s - 1) : 0.0;
        const double p = dx * px + dy * py;
        if (corner == 0 || p < pmin) pmin = p;
        if (corner == 0 || p > pmax) pmax = p;
    }
    const double span = (pmax - pmin) > 1e-12 ? (pmax - pmin) : 1.0;
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t y = 0; y < s; ++y)
            for (int64_t x = 0; x < s; ++x) {
                const double t = (dx * double(x) + dy * double(y) - pmin) / span;
                img.at4(0, ch, y, x) = c0[ch] + (c1[ch] - c0[ch]) * t;
            }
}

void fill_blobs(Tensor& img, Rng& rng) {
    const int64_t s = img.dim(2);
    const double base = 0.2 + 0.3 * rng.uniform();
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = base;
    const int64_t nb = 2 + int64_t(rng.next_u64() % 3);
    for (int64_t b = 0; b < nb; ++b) {
        const double cx = rng.uniform() * double(s - 1);
        const double cy = rng.uniform() * double(s - 1);
        const double sigma = double(s) * (0.08 + 0.17 * rng.uniform());
        double amp[3];
        for (int ch = 0; ch < 3; ++ch) amp[ch] = -0.5 + 1.2 * rng.uniform();
        for (int64_t ch = 0; ch < 3; ++ch)
            for (int64_t y = 0; y < s; ++y)
                for (int64_t x = 0; x < s; ++x) {
                    const double d2 = (double(x) - cx) * (double(x) - cx) +
                                      (double(y) - cy) * (double(y) - cy);
                    img.at4(0, ch, y, x) += amp[ch] * std::exp(-d2 / (2.0 * sigma * sigma));
                }
    }
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = clamp01(img.data()[i]);
}

void fill_checkerboard(Tensor& img, Rng& rng) {
    const int64_t s = img.dim(2);
    const int64_t cell = 4;
    // Color ranges kept disjoint so adjacent cells always differ.
    double c0[3], c1[3];
    for (int ch = 0; ch < 3; ++ch) c0[ch] = 0.4 * rng.uniform();
    for (int ch = 0; ch < 3; ++ch) c1[ch] = 0.6 + 0.4 * rng.uniform();
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t y = 0; y < s; ++y)
            for (int64_t x = 0; x < s; ++x) {
                const bool even = ((x / cell + y / cell) % 2) == 0;
                img.at4(0, ch, y, x) = even ? c0[ch] : c1[ch];
            }
}

}  // namespace

std::vector<ImagePair> make_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    std::vector<ImagePair> out;
    out.reserve(size_t(cfg.count));
    const Rng root(cfg.seed);
    for (int64_t i = 0; i < cfg.count; ++i) {
        Rng rng = root.derive(uint64_t(i));
        Tensor hr({1, 3, cfg.size, cfg.size});
        CorpusKind kind = cfg.kind;
        if (kind == CorpusKind::mixed) {
            switch (i % 3) {
                case 0: kind = CorpusKind::gradients; break;
                case 1: kind = CorpusKind::gaussian_blobs; break;
                default: kind = CorpusKind::checkerboards; break;
            }
        }
        switch (kind) {
            case CorpusKind::gradients: fill_gradient(hr, rng); break;
            case CorpusKind::gaussian_blobs: fill_blobs(hr, rng); break;
            case CorpusKind::checkerboards: fill_checkerboard(hr, rng); break;
            case CorpusKind::mixed: break;  // unreachable
        }
        ImagePair pair;
        pair.hr = hr;
        pair.lr = downscale(hr, cfg.kernel);
        out.push_back(std::move(pair));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (hr_patch < 1) throw ConfigError("train: hr_patch must be >= 1");
    if (lr0 <= 0.0) throw ConfigError("train: lr0 must be > 0");
    for (double p : lr_halving_points)
        if (!(p > 0.0 && p < 1.0))
            throw ConfigError("train: halving points must lie in (0,1)");
    if (noise_std < 0.0) throw ConfigError("train: noise_std must be >= 0");
    if (freeze_encoder_frac < 0.0 || freeze_encoder_frac > 1.0)
        throw ConfigError("train: freeze_encoder_frac must be in [0,1]");
    if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be >= 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("train: betas must be in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("train: adam_eps must be > 0");
}

double lr_at_fraction(const TrainConfig& cfg, double f) {
    int halvings = 0;
    for (double p : cfg.lr_halving_points)
        if (p <= f) ++halvings;
    return std::ldexp(cfg.lr0, -halvings);
}

namespace {

void set_param_grads(FlowModel& model, bool on) {
    model.visit_params([&](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

void set_param_grads(LrEncoder& enc, bool on) {
    enc.visit_params("", [&](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

std::string nonfinite_diagnostic(int64_t step, double loss, const EncodeStats& stats) {
    std::ostringstream os;
    os << "step " << step << ": non-finite loss (" << loss << "); per-layer logdet means:";
    for (const auto& entry : stats.layers) {
        double m = 0.0;
        for (double v : entry.logdet) m += v;
        if (!entry.logdet.empty()) m /= double(entry.logdet.size());
        os << "\n  " << entry.name << " = " << m;
    }
    return os.str();
}

}  // namespace

TrainReport train(FlowModel& model, LrEncoder& enc, const std::vector<ImagePair>& corpus,
                  const TrainConfig& cfg, const DownscaleKernel& kernel,
                  const TrainResume* resume) {
    cfg.validate();
    kernel.validate();
    if (corpus.empty()) throw UsageError("train: corpus is empty");
    const Tensor& first = corpus[0].hr;
    if (first.ndim() != 4 || first.dim(0) != 1)
        throw ShapeError("train: corpus images must be [1,C,H,W], got " +
                         shape_str(first.shape()));
    const int64_t ch = first.dim(1);
    const int64_t s = first.dim(2);
    if (first.dim(3) != s) throw ShapeError("train: corpus images must be square");
    for (const ImagePair& p : corpus)
        if (!p.hr.same_shape(first))
            throw ShapeError("train: corpus images must share one shape");
    if (cfg.hr_patch > s)
        throw ConfigError("train: hr_patch " + std::to_string(cfg.hr_patch) +
                          " exceeds corpus image size " + std::to_string(s));
    if (cfg.hr_patch % kernel.factor != 0)
        throw ConfigError("train: hr_patch must be divisible by the scale factor");

    const int64_t patch = cfg.hr_patch;
    const int64_t batch = cfg.batch;
    const int64_t dims = ch * patch * patch;
    const bool crop = patch < s;
    const int64_t start = resume ? resume->start_step : 0;
    if (start < 0 || start > cfg.total_steps)
        throw ConfigError("train: resume step out of range");

    TrainReport rep;
    rep.next_step = start;
    const Rng root(cfg.seed);

    set_param_grads(model, true);
    bool enc_live = cfg.freeze_encoder_frac <= 0.0;
    set_param_grads(enc, enc_live);
    if (enc_live) rep.encoder_unfroze_at = 0;

    std::vector<Tensor> params;
    model.visit_params([&](const std::string&, Tensor& t) { params.push_back(t); });
    enc.visit_params("", [&](const std::string&, Tensor& t) { params.push_back(t); });
    Adam::Hyper hp;
    hp.lr = cfg.lr0;
    hp.beta1 = cfg.adam_beta1;
    hp.beta2 = cfg.adam_beta2;
    hp.eps = cfg.adam_eps;
    Adam adam(params, hp);
    if (resume) {
        if (resume->slots.size() != params.size())
            throw ConfigError("train: resume optimizer state has " +
                              std::to_string(resume->slots.size()) + " slots, expected " +
                              std::to_string(params.size()));
        for (size_t i = 0; i < params.size(); ++i) {
            const OptimSlotState& st = resume->slots[i];
            Adam::Slot& slot = adam.slot(int64_t(i));
            if (st.m.size() != slot.m.size() || st.v.size() != slot.v.size())
                throw ConfigError("train: resume optimizer slot " + std::to_string(i) +
                                  " has the wrong size");
            slot.m = st.m;
            slot.v = st.v;
            slot.t = st.t;
        }
    }

    rep.log.reserve(size_t(cfg.total_steps - start));
    for (int64_t step = start; step < cfg.total_steps; ++step) {
        // Each step owns a child stream, so a resumed run replays the
        // exact batches and noise the uninterrupted run would have seen.
        Rng rng = root.derive(uint64_t(step));
        const double f = double(step) / double(cfg.total_steps);
        if (!enc_live && f >= cfg.freeze_encoder_frac) {
            set_param_grads(enc, true);
            enc_live = true;
            rep.encoder_unfroze_at = step;
        }
        const double lr = lr_at_fraction(cfg, f);
        adam.set_lr(lr);

        // Assemble the clean HR batch, derive LR from it, then noise the
        // target. The conditioning path never sees the noise.
        Tensor hr_b({batch, ch, patch, patch});
        for (int64_t b = 0; b < batch; ++b) {
            const ImagePair& p = corpus[rng.next_u64() % corpus.size()];
            int64_t oy = 0, ox = 0;
            if (crop) {
                oy = int64_t(rng.next_u64() % uint64_t(s - patch + 1));
                ox = int64_t(rng.next_u64() % uint64_t(s - patch + 1));
            }
            for (int64_t c = 0; c < ch; ++c)
                for (int64_t y = 0; y < patch; ++y)
                    std::copy_n(p.hr.data() + p.hr.offset4(0, c, oy + y, ox), patch,
                                hr_b.data() + hr_b.offset4(b, c, y, 0));
        }
        Tensor lr_b = downscale(hr_b, kernel);
        if (cfg.noise_std > 0.0)
            for (int64_t i = 0; i < hr_b.numel(); ++i)
                hr_b.data()[i] += cfg.noise_std * rng.gaussian();

        if (step == start && !model.actnorm_initialized()) {
            Tensor u0 = enc.forward(lr_b);
            model.init_actnorm(hr_b, u0);
        }

        Tape tape;
        Tensor u = enc.forward(lr_b);
        EncodeResult er = model.encode(hr_b, u);
        Tensor loss = ops::mean(er.nll);
        const double nll = loss.vec()[0];
        if (!std::isfinite(nll)) {
            NoGradGuard guard;
            EncodeStats stats;
            model.encode(hr_b, u, &stats);
            rep.aborted = true;
            rep.abort_reason = nonfinite_diagnostic(step, nll, stats);
            break;
        }
        tape.backward(loss);
        adam.step(tape, cfg.grad_clip);
        rep.log.push_back({step, nll, bits_per_dim(nll, dims), lr});
        rep.next_step = step + 1;
    }

    set_param_grads(model, false);
    set_param_grads(enc, false);
    rep.optim.reserve(size_t(adam.num_slots()));
    for (int64_t i = 0; i < adam.num_slots(); ++i) {
        const Adam::Slot& slot = adam.slot(i);
        rep.optim.push_back({slot.m, slot.v, slot.t});
    }
    return rep;
}

void write_train_csv(const TrainReport& report, std::ostream& os) {
    os << "step,nll_nats,bits_per_dim,lr\n";
    os << std::setprecision(12);
    for (const StepLog& row : report.log)
        os << row.step << ',' << row.nll_nats << ',' << row.bits_per_dim << ',' << row.lr
           << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation sweep
// ---------------------------------------------------------------------------

std::vector<EvalRow> eval_sweep(const FlowModel& model, const LrEncoder& enc,
                                const std::vector<ImagePair>& eval_set,
                                const std::vector<double>& taus, int64_t n_samples,
                                const DownscaleKernel& kernel, const Rng& rng) {
    if (eval_set.empty()) throw UsageError("eval_sweep: eval split is empty");
    if (taus.empty()) throw UsageError("eval_sweep: no temperatures given");
    if (n_samples < 1) throw UsageError("eval_sweep: n_samples must be >= 1");
    for (double t : taus)
        if (t < 0.0) throw DomainError("eval_sweep: tau must be >= 0");

    const int64_t images = int64_t(eval_set.size());
    std::vector<EvalRow> rows;
    rows.reserve(taus.size());
    for (size_t ti = 0; ti < taus.size(); ++ti) {
        const double tau = taus[ti];
        EvalRow row;
        row.tau = tau;
        double psnr_sum = 0.0, ssim_sum = 0.0, lrp_sum = 0.0, div_sum = 0.0;
        for (int64_t i = 0; i < images; ++i) {
            const ImagePair& pair = eval_set[size_t(i)];
            Tensor u = enc.forward(pair.lr);
            std::vector<Tensor> samples;
            samples.reserve(size_t(n_samples));
            for (int64_t k = 0; k < n_samples; ++k) {
                Rng child = rng.derive(uint64_t((int64_t(ti) * images + i) * n_samples + k));
                Tensor y = model.sample(u, tau, child);
                psnr_sum += psnr(y, pair.hr);
                ssim_sum += ssim(y, pair.hr);
                lrp_sum += lr_psnr(y, pair.lr, kernel);
                samples.push_back(std::move(y));
            }
            if (n_samples >= 2) div_sum += diversity_sigma(samples);
        }
        const double denom = double(images * n_samples);
        row.psnr_db = psnr_sum / denom;
        row.ssim = ssim_sum / denom;
        row.lr_psnr_db = lrp_sum / denom;
        row.diversity = div_sum / double(images);
        rows.push_back(row);
    }
    return rows;
}

void write_eval_csv(const std::vector<EvalRow>& rows, std::ostream& os) {
    os << "tau,psnr,ssim,lr_psnr,diversity\n";
    os << std::setprecision(12);
    for (const EvalRow& r : rows)
        os << r.tau << ',' << r.psnr_db << ',' << r.ssim << ',' << r.lr_psnr_db << ','
           << r.diversity << '\n';
}

}  // namespace flowsr
