#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "flowsr/conditioning.hpp"
#include "flowsr/flow_model.hpp"
#include "flowsr/rng.hpp"

namespace flowsr {

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

enum class CorpusKind { gradients, gaussian_blobs, checkerboards, mixed };

struct CorpusConfig {
    CorpusKind kind = CorpusKind::mixed;
    int64_t size = 32;  // HR side length
    int64_t count = 64;
    uint64_t seed = 1;
    DownscaleKernel kernel;  // produces the LR half of each pair

    void validate() const;
};

/// Deterministic image corpus: linear color ramps, soft Gaussian blobs
/// and cell-4 checkerboards (mixed cycles through the three in order).
/// Every image derives from (seed, index) alone, lands in [0,1], and is
/// paired with its downscale.
std::vector<ImagePair> make_corpus(const CorpusConfig& cfg);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t total_steps = 5000;
    int64_t batch = 16;  // toy runs use 8
    int64_t hr_patch = 32;
    double lr0 = 5e-4;
    std::vector<double> lr_halving_points = {0.5, 0.75, 0.9, 0.95};
    /// Stddev of the Gaussian noise added to HR targets, in [0,1] units
    /// (the 0-255 convention value 4/sqrt(3), rescaled).
    double noise_std = 4.0 / (1.7320508075688772 * 255.0);
    double freeze_encoder_frac = 0.5;
    double grad_clip = 50.0;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    uint64_t seed = 1;

    void validate() const;
};

/// Learning rate after a fraction f of training is completed:
/// lr0 * 2^-(number of halving points <= f).
double lr_at_fraction(const TrainConfig& cfg, double f);

struct StepLog {
    int64_t step = 0;  // 0-based
    double nll_nats = 0.0;
    double bits_per_dim = 0.0;
    double lr = 0.0;
};

/// Optimizer state for one parameter, in the canonical order train()
/// registers them (all model parameters, then all encoder parameters).
struct OptimSlotState {
    std::vector<double> m, v;
    int64_t t = 0;
};

/// Hand this back to train() to continue a run: because every step draws
/// its randomness from a child stream derived from the step index, a
/// resumed run reproduces the uninterrupted one bit for bit (given the
/// optimizer state below).
struct TrainResume {
    int64_t start_step = 0;
    std::vector<OptimSlotState> slots;
};

struct TrainReport {
    std::vector<StepLog> log;
    bool aborted = false;        // non-finite loss hit
    std::string abort_reason;    // includes a per-layer logdet dump
    int64_t encoder_unfroze_at = -1;  // step index, -1 if never
    int64_t next_step = 0;            // where a resume would continue
    std::vector<OptimSlotState> optim;
};

/// NLL training: each step samples a batch (random patches when the
/// corpus images exceed hr_patch, re-downscaled so every pair stays
/// consistent), adds Gaussian noise to the HR target only, runs the
/// exact-likelihood objective and one Adam update under the halving
/// schedule. Encoder parameters stay frozen for the first
/// freeze_encoder_frac of the run. Actnorms initialize from the first
/// batch if they have not been already. A non-finite loss stops the run
/// and leaves a per-layer logdet diagnostic in the report.
TrainReport train(FlowModel& model, LrEncoder& enc, const std::vector<ImagePair>& corpus,
                  const TrainConfig& cfg, const DownscaleKernel& kernel,
                  const TrainResume* resume = nullptr);

/// "step,nll_nats,bits_per_dim,lr" rows.
void write_train_csv(const TrainReport& report, std::ostream& os);

// ---------------------------------------------------------------------------
// Evaluation sweep
// ---------------------------------------------------------------------------

struct EvalRow {
    double tau = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double lr_psnr_db = 0.0;
    double diversity = 0.0;
};

/// For each temperature: draws n_samples SR samples per eval image
/// (sample k of image i at temperature index t uses the child stream
/// derive(((t*images)+i)*n_samples+k)), averages PSNR/SSIM/LR-PSNR over
/// all samples and reports the mean per-image diversity. n_samples < 2
/// reports diversity 0.
std::vector<EvalRow> eval_sweep(const FlowModel& model, const LrEncoder& enc,
                                const std::vector<ImagePair>& eval_set,
                                const std::vector<double>& taus, int64_t n_samples,
                                const DownscaleKernel& kernel, const Rng& rng);

/// "tau,psnr,ssim,lr_psnr,diversity" rows; infinities print as "inf".
void write_eval_csv(const std::vector<EvalRow>& rows, std::ostream& os);

}  // namespace flowsr
