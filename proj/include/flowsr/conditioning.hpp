#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowsr/flow_layers.hpp"
#include "flowsr/rng.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {

// ---------------------------------------------------------------------------
// LR feature encoder
// ---------------------------------------------------------------------------

struct EncoderConfig {
    int64_t blocks = 4;  // residual blocks after the stem
    int64_t width = 64;  // channels everywhere inside the encoder
    int64_t taps = 5;    // how many activations get concatenated into u

    void validate() const;
    int64_t out_channels() const { return taps * width; }
};

/// Encoder for the low-resolution image: a 3x3 conv stem followed by
/// plain residual blocks (conv - relu - conv plus skip, no normalization
/// anywhere). The conditioning features u are the concatenation of
/// `taps` equally spaced activations along the chain, where position 0
/// is the stem output and position i is the output of block i; both
/// endpoints are always included (tap t sits at round(t*blocks/(taps-1))).
///
/// Each block's second conv starts at zero, so a fresh encoder is a
/// stack of identities: every tap equals the stem output, and a zero
/// input produces u = broadcast stem bias.
class LrEncoder {
public:
    LrEncoder(EncoderConfig cfg, Rng& rng);

    /// x: [B,3,h,w] in [0,1] -> u: [B, taps*width, h, w].
    Tensor forward(const Tensor& x) const;

    const EncoderConfig& config() const { return cfg_; }
    int64_t out_channels() const { return cfg_.out_channels(); }
    const std::vector<int64_t>& tap_indices() const { return tap_indices_; }

    void visit_params(const std::string& prefix, const ParamVisitor& fn);

    Tensor& stem_bias() { return stem_b_; }

private:
    struct ResBlock {
        Tensor w1, b1, w2, b2;
    };

    EncoderConfig cfg_;
    Tensor stem_w_, stem_b_;
    std::vector<ResBlock> blocks_;
    std::vector<int64_t> tap_indices_;  // ascending, in [0, blocks]
};

// ---------------------------------------------------------------------------
// Downscaling operator
// ---------------------------------------------------------------------------

enum class ResampleKind {
    bicubic_a_minus_half,  // cubic convolution kernel, a = -0.5
    box,                   // plain mean over aligned factor x factor blocks
    bilinear,              // triangle kernel
};

struct DownscaleKernel {
    ResampleKind kind = ResampleKind::bicubic_a_minus_half;
    int64_t factor = 4;     // one of 2, 4, 8
    bool antialias = true;  // widen the kernel support by `factor`

    void validate() const;
};

/// Deterministic separable downscale of a [B,C,H,W] image stack; H and W
/// must divide by the factor. Output pixel centers follow the half-pixel
/// convention, edges replicate, and the weights at every output pixel
/// are renormalized to sum to exactly 1, so constants pass through
/// unchanged. Not differentiable (data preparation only -- nothing is
/// recorded on a tape).
Tensor downscale(const Tensor& y, const DownscaleKernel& kernel);

/// Per-axis resampling plan: output index i reads `w.size()` consecutive
/// input samples starting at `start`. Exposed for the oracle tests.
struct ResampleTap {
    int64_t start = 0;
    std::vector<double> w;
};
std::vector<ResampleTap> plan_downscale_axis(int64_t in_size, const DownscaleKernel& kernel);

// ---------------------------------------------------------------------------
// Encoder pretraining
// ---------------------------------------------------------------------------

struct ImagePair {
    Tensor lr;  // [1,C,h,w]
    Tensor hr;  // [1,C,h*factor,w*factor]
};

/// Rows stacked along the batch axis; all inputs must be [1,C,H,W] with
/// identical shapes.
Tensor stack_images(const std::vector<Tensor>& images);

struct PretrainOptions {
    int64_t steps = 200;
    int64_t batch = 8;
    double lr = 2e-4;
    double grad_clip = 50.0;
};

struct PretrainReport {
    std::vector<double> loss;  // per-step mean L1
};

/// Pretrains the encoder as a plain super-resolver: a temporary 3x3 conv
/// head maps u to 3*factor^2 channels, pixel-unshuffles up to HR size,
/// and the mean L1 distance to the HR target is minimized with Adam. The
/// head is dropped on return; only the encoder weights persist. The
/// factor must be 2, 4 or 8, and the dataset must be non-empty.
PretrainReport pretrain_encoder(LrEncoder& enc, const std::vector<ImagePair>& dataset,
                                int64_t factor, const PretrainOptions& opt, Rng& rng);

}  // namespace flowsr
