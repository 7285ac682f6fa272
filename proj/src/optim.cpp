#include "flowsr/optim.hpp"

#include <cmath>

#include "flowsr/errors.hpp"

namespace flowsr {

Adam::Adam(std::vector<Tensor> params, Hyper hp) : hp_(hp) {
    if (hp_.lr <= 0.0) throw ConfigError("Adam: lr must be positive");
    if (hp_.beta1 < 0.0 || hp_.beta1 >= 1.0 || hp_.beta2 < 0.0 || hp_.beta2 >= 1.0)
        throw ConfigError("Adam: betas must lie in [0,1)");
    slots_.reserve(params.size());
    for (Tensor& p : params) {
        if (!p.defined()) throw UsageError("Adam: undefined parameter tensor");
        Slot s;
        s.param = p;
        s.m.assign(static_cast<size_t>(p.numel()), 0.0);
        s.v.assign(static_cast<size_t>(p.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Adam::step(const Tape& tape, double max_grad_norm) {
    // First pass: global norm over every gradient present on the tape.
    double sq = 0.0;
    for (const Slot& s : slots_) {
        const std::vector<double>* g = tape.grad_if(s.param);
        if (!g) continue;
        for (double v : *g) sq += v * v;
    }
    last_norm_ = std::sqrt(sq);

    double gscale = 1.0;
    if (max_grad_norm > 0.0 && last_norm_ > max_grad_norm)
        gscale = max_grad_norm / last_norm_;

    for (Slot& s : slots_) {
        const std::vector<double>* g = tape.grad_if(s.param);
        if (!g) continue;
        ++s.t;
        const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(s.t));
        const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(s.t));
        double* p = s.param.data();
        const size_t n = g->size();
        for (size_t i = 0; i < n; ++i) {
            const double gi = (*g)[i] * gscale;
            s.m[i] = hp_.beta1 * s.m[i] + (1.0 - hp_.beta1) * gi;
            s.v[i] = hp_.beta2 * s.v[i] + (1.0 - hp_.beta2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= hp_.lr * mhat / (std::sqrt(vhat) + hp_.eps);
        }
    }
}

}  // namespace flowsr
