#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowsr/flow_layers.hpp"
#include "flowsr/rng.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {

/// Architecture of the multi-level flow. The defaults mirror the 4x
/// reference network; the toy and micro test configurations only shrink
/// the numbers or flip the structural switches.
struct ArchConfig {
    int64_t levels = 3;
    int64_t steps_per_level = 16;
    int64_t transitional_steps = 2;
    int64_t hidden = 64;
    bool use_affine_injector = true;
    bool use_transitional_steps = true;
    /// Disabled only by the micro density-test configuration, which works
    /// on 1x1 "images" where squeezing is impossible.
    bool use_squeeze = true;
    int64_t scale_factor = 4;
    int64_t hr_channels = 3;
    /// Channel count of the conditioning features u; 0 builds the
    /// unconditional variant (no injectors, couplings driven by h alone).
    int64_t cond_channels = 0;

    void validate() const;  // throws ConfigError
    bool conditional() const { return cond_channels > 0; }
};

/// One flow-step: actnorm -> invertible 1x1 -> (affine injector) ->
/// affine coupling. Transitional steps right after a squeeze drop the
/// conditioning entirely (no injector, unconditional coupling).
struct FlowStep {
    ActNorm actnorm;
    Inv1x1 mix;
    std::optional<AffineInjector> injector;
    AffineCoupling coupling;

    FlowStep(int64_t channels, int64_t cond_channels, int64_t hidden, bool with_injector,
             Rng& rng);
};

struct EncodeResult {
    std::vector<Tensor> z;  // one latent tensor per level, coarse last
    Tensor nll;             // [B], nats
    Tensor logdet;          // [B], sum of all layer contributions
    Tensor prior_nll;       // [B], -log p_z(z)
};

/// Optional per-layer breakdown of the logdet, for the additivity check
/// and for diagnosing numeric blow-ups during training.
struct EncodeStats {
    struct Entry {
        std::string name;
        std::vector<double> logdet;  // per batch element
    };
    std::vector<Entry> layers;
};

/// nats -> bits per dimension.
double bits_per_dim(double nll_nats, int64_t dims);

class FlowModel {
public:
    FlowModel(ArchConfig cfg, Rng& rng);

    const ArchConfig& cfg() const { return cfg_; }

    /// HR image + conditioning features -> latents and exact NLL.
    EncodeResult encode(const Tensor& y, const Tensor& u, EncodeStats* stats = nullptr) const;

    /// Exact inverse of encode; never differentiated.
    Tensor decode(const std::vector<Tensor>& z, const Tensor& u) const;

    /// log p(y | u) = -nll, per batch element.
    Tensor log_density(const Tensor& y, const Tensor& u) const;

    /// Latents at temperature tau (stddev convention: z ~ N(0, tau^2 I)).
    std::vector<Tensor> draw_latents(int64_t batch, int64_t hr_h, int64_t hr_w, double tau,
                                     Rng& rng) const;

    /// Convenience: infer the HR size from u (conditional models only),
    /// draw latents at tau and decode.
    Tensor sample(const Tensor& u, double tau, Rng& rng) const;

    /// Latent shapes for a given batch and HR size, coarse level last.
    std::vector<std::vector<int64_t>> latent_shapes(int64_t batch, int64_t hr_h,
                                                    int64_t hr_w) const;

    /// Data-dependent actnorm init from one representative batch; runs a
    /// forward pass and freezes statistics layer by layer.
    void init_actnorm(const Tensor& y, const Tensor& u);
    bool actnorm_initialized() const;
    void mark_actnorm_initialized();

    void visit_params(const ParamVisitor& fn);
    int64_t num_params();

    /// Structural summary, one string per layer in forward order.
    std::vector<std::string> layer_names() const;

private:
    struct Level {
        std::vector<FlowStep> transitional;
        std::vector<FlowStep> steps;
        int64_t channels = 0;  // channel count the steps operate on
    };

    EncodeResult encode_impl(const Tensor& y, const Tensor& u, bool init_actnorms,
                             EncodeStats* stats) const;
    void check_hr(const Tensor& y) const;
    void check_cond_features(const Tensor& u, int64_t batch) const;

    ArchConfig cfg_;
    std::vector<Level> levels_;
};

}  // namespace flowsr
