#pragma once

#include <cstdint>
#include <vector>

#include "flowsr/conditioning.hpp"
#include "flowsr/flow_model.hpp"
#include "flowsr/rng.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {

// Latent-space manipulation: temperature-aware re-normalization of
// latent collections, style/content transfer between images, and the
// restoration mapping (encode, re-normalize, decode).
//
// Randomness convention: every entry point takes the generator by const
// reference and derives child streams from its *seed*, never from its
// stream position. A call's output therefore depends only on (inputs,
// parameters, seed); callers wanting distinct stochastic repetitions
// pass distinct derived generators.

/// How the latent stack is partitioned into collections:
///   global  -- one collection holding every coordinate of every level;
///   local   -- one collection per spatial position and level, across
///              channels;
///   spatial -- one collection per channel and level, across positions.
enum class NormStrategy { global, local, spatial };

/// Axis-aligned rectangle in HR pixel coordinates; w or h <= 0 means an
/// empty region that selects nothing.
struct Region {
    int64_t x = 0, y = 0, w = 0, h = 0;
    bool empty() const { return w <= 0 || h <= 0; }
};

/// Moments drawn for one collection of n i.i.d. N(0, tau^2) coordinates:
/// the sample mean is N(0, tau^2/n) and the unbiased sample variance is
/// Gamma(shape (n-1)/2, scale 2*tau^2/(n-1)). tau is the sampling
/// temperature in the stddev convention used by FlowModel; the squared
/// value enters the two laws above.
struct MomentDraw {
    double mu_hat = 0.0;
    double sigma2_hat = 0.0;
    int64_t n = 0;
    double tau = 0.0;
};

struct NormalizeReport {
    int64_t collections = 0;         // non-empty collections visited
    int64_t normalized = 0;          // actually re-normalized
    int64_t skipped_degenerate = 0;  // empirical std <= 1e-12, left alone
};

/// One 0/1 mask per level, flattened row-major over that level's [h,w]
/// latent grid. A set cell selects all channels at that position.
using LevelMasks = std::vector<std::vector<uint8_t>>;

/// Gamma(shape, scale) via the Marsaglia-Tsang squeeze method (with the
/// U^(1/k) boost below shape 1). scale == 0 returns 0 without consuming
/// randomness. Throws DomainError for shape <= 0 or negative scale.
double gamma_sample(Rng& rng, double shape, double scale);

/// Draws (mu_hat, sigma2_hat) for a collection of size n at temperature
/// tau. tau == 0 is the point mass at (0, 0) and consumes no randomness.
MomentDraw draw_moments(Rng& rng, int64_t n, double tau);

/// Maps an HR-space region onto each level's latent grid: coordinates
/// divide by the grid's HR/latent ratio (2^level in the 1-based level
/// numbering), then the resulting rectangle dilates by one cell so that
/// boundary-straddling receptive fields land inside. Out-of-bounds
/// non-empty regions throw DomainError.
LevelMasks map_region_to_levels(const Region& region, int64_t hr_h, int64_t hr_w,
                                const std::vector<std::vector<int64_t>>& latent_shapes);

/// Re-standardizes every collection to freshly drawn moments:
/// z_hat = (sigma_hat / sigma_tilde) * (z - mu_tilde) + mu_hat, where
/// (mu_tilde, sigma_tilde) are the collection's empirical mean and
/// unbiased std. Afterwards each touched collection's empirical moments
/// equal its draw exactly. Each enumerated collection consumes its own
/// child RNG stream (derived from the passed generator's seed and the
/// collection's index in a fixed level-major order), so results do not
/// depend on processing order. Collections with empirical std <= 1e-12
/// are left untouched and counted in the report. masks restricts the
/// spatial support per level; batch size must be 1.
std::vector<Tensor> normalize_latents(const std::vector<Tensor>& z, NormStrategy strategy,
                                      double tau, const Rng& rng,
                                      const LevelMasks* masks = nullptr,
                                      NormalizeReport* report = nullptr);

/// Re-renders the HR content of y_src under the LR conditioning of
/// x_tgt: encode y_src against its own downscale, decode that latent
/// against x_tgt. With a region, only latents inside the mapped region
/// keep y_src's encoding; the rest are drawn fresh at temperature tau.
/// Without a region the operation is deterministic.
Tensor style_transfer(const FlowModel& model, const LrEncoder& enc,
                      const DownscaleKernel& kernel, const Tensor& y_src, const Tensor& x_tgt,
                      double tau, const Rng& rng, const Region* region = nullptr);

/// Pastes `patch` into y_base at (at_x, at_y), encodes the edit against
/// y_base's own LR conditioning, locally re-normalizes only the latents
/// whose footprint meets the pasted rectangle, and decodes. An undefined
/// patch is the empty edit: nothing is pasted or normalized, and the
/// round trip reproduces y_base. Placement must fit inside the image.
Tensor content_transfer(const FlowModel& model, const LrEncoder& enc,
                        const DownscaleKernel& kernel, const Tensor& y_base, const Tensor& patch,
                        int64_t at_x, int64_t at_y, double tau, const Rng& rng);

/// Restoration mapping: encode the degraded image against its own
/// downscale, apply spatial then local normalization (independent RNG
/// streams derived from the one passed in), decode. Projects the image
/// onto what the model considers clean content with the same LR.
Tensor restore(const FlowModel& model, const LrEncoder& enc, const DownscaleKernel& kernel,
               const Tensor& y_degraded, double tau, const Rng& rng,
               NormalizeReport* report = nullptr);

enum class SelectMetric { psnr, ssim };

/// Draws n candidate SR samples (candidate k uses the child stream
/// rng.derive(k), so candidate pools are nested across n for a fixed
/// seed) and returns the one scoring best against y_ref.
Tensor sample_best_of_n(const FlowModel& model, const LrEncoder& enc, const Tensor& x_lr,
                        double tau, int64_t n, SelectMetric metric, const Tensor& y_ref,
                        const Rng& rng);

}  // namespace flowsr
