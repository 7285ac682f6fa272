#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowsr/conditioning.hpp"
#include "flowsr/flow_model.hpp"
#include "flowsr/training.hpp"

namespace flowsr {

/// Run settings, parsed from a plain key=value file with [arch], [train],
/// [data] and [eval] sections and '#' comments. Every key has a default
/// (the member initializers below); unknown sections or keys are
/// rejected. serialize() is canonical -- fixed ordering, doubles at full
/// precision -- so parse(serialize(parse(x))) reproduces the settings
/// exactly.
struct RunConfig {
    // [arch]
    int64_t levels = 2;
    int64_t steps_per_level = 4;
    int64_t transitional_steps = 2;
    int64_t hidden = 32;
    int64_t scale_factor = 4;
    int64_t enc_blocks = 4;
    int64_t enc_width = 8;
    int64_t enc_taps = 2;

    // [train]
    int64_t total_steps = 5000;
    int64_t batch = 8;
    int64_t hr_patch = 32;
    double lr0 = 5e-4;
    std::vector<double> halving_points = {0.5, 0.75, 0.9, 0.95};
    double noise_std = 4.0 / (1.7320508075688772 * 255.0);
    double freeze_encoder_frac = 0.5;
    double grad_clip = 50.0;
    int64_t pretrain_steps = 200;
    double pretrain_lr = 2e-4;

    // [data]
    std::string data_kind = "mixed";  // gradients | gaussian_blobs | checkerboards | mixed
    int64_t data_size = 32;
    int64_t data_count = 64;
    uint64_t data_seed = 1;
    std::string kernel = "bicubic";  // bicubic | box | bilinear
    bool antialias = true;

    // [eval]
    std::vector<double> eval_taus = {0.0, 0.3, 0.6, 0.9};
    int64_t eval_samples = 4;
    int64_t eval_count = 16;
    uint64_t eval_seed = 99;

    // Materialize the typed configs the engine modules consume.
    ArchConfig arch() const;  // cond_channels = enc_width * enc_taps
    EncoderConfig encoder() const;
    TrainConfig train(uint64_t seed) const;
    DownscaleKernel downscale_kernel() const;
    CorpusConfig train_corpus() const;
    CorpusConfig eval_corpus() const;

    void validate() const;  // delegates to the typed configs
};

/// Parse config text; missing keys keep their defaults.
RunConfig parse_config(const std::string& text);

/// Read and parse a config file. IoError when unreadable.
RunConfig load_config(const std::string& path);

std::string serialize_config(const RunConfig& cfg);

/// Just the [arch] section, used as the checkpoint's embedded
/// architecture block.
std::string serialize_arch_section(const RunConfig& cfg);

}  // namespace flowsr
