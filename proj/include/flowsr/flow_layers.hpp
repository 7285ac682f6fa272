#pragma once

#include <functional>
#include <string>
#include <utility>

#include "flowsr/rng.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {

/// Raw scale outputs pass through s -> kScaleClamp * tanh(s / kScaleClamp)
/// before exponentiation, identically in forward and inverse, so early
/// training can never overflow exp() and bijectivity is unaffected.
constexpr double kScaleClamp = 5.0;

Tensor soft_clamp(const Tensor& raw_scale);

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

/// Per-channel learned affine h' = s[c]*h + b[c]. Starts as the identity;
/// init_from() replaces the parameters so the first batch comes out with
/// per-channel mean 0 and unit sample variance.
class ActNorm {
public:
    explicit ActNorm(int64_t channels);

    /// Data-dependent init from a [B,C,H,W] batch of pre-actnorm input.
    void init_from(const Tensor& h);
    bool initialized() const { return initialized_; }
    void mark_initialized(bool v) { initialized_ = v; }

    /// logdet ([B]) is extended in place by H*W*sum_c log|s_c|.
    Tensor forward(const Tensor& h, Tensor& logdet) const;
    Tensor inverse(const Tensor& h) const;

    void visit_params(const std::string& prefix, const ParamVisitor& fn);

    int64_t channels() const { return scale_.dim(0); }
    Tensor& scale() { return scale_; }
    Tensor& bias() { return bias_; }

private:
    Tensor scale_, bias_;  // [C]
    bool initialized_ = false;
};

/// Invertible 1x1 convolution: every pixel's channel vector is multiplied
/// by a learned square matrix (non-factorized; the inverse runs an LU
/// solve at call time). Initialized to a random rotation so logdet starts
/// at exactly zero.
class Inv1x1 {
public:
    Inv1x1(int64_t channels, Rng& rng);

    Tensor forward(const Tensor& h, Tensor& logdet) const;
    Tensor inverse(const Tensor& h) const;

    void visit_params(const std::string& prefix, const ParamVisitor& fn);

    Tensor& weight() { return weight_; }

private:
    Tensor weight_;  // [C,C]
};

/// Two 3x3 convolutions (He init) with relu, then two zero-initialized
/// 3x3 heads emitting a raw scale map and a shift map. Zero heads make
/// every coupling-style layer start as an exact identity.
class CouplingNet {
public:
    CouplingNet(int64_t in_channels, int64_t hidden, int64_t out_channels, Rng& rng);

    /// (raw scale, shift), each [B,out,H,W]. Clamp is the caller's job.
    std::pair<Tensor, Tensor> heads(const Tensor& x) const;

    void visit_params(const std::string& prefix, const ParamVisitor& fn);

    int64_t in_channels() const { return w1_.dim(1); }
    Tensor& scale_head_weight() { return ws_; }
    Tensor& scale_head_bias() { return bs_; }
    Tensor& shift_head_bias() { return bb_; }

private:
    Tensor w1_, b1_, w2_, b2_;  // trunk
    Tensor ws_, bs_, wb_, bb_;  // scale head, shift head
};

/// Affine coupling: the first half of the channels passes through and
/// drives (optionally together with conditioning features) an affine
/// transform of the second half. cond_channels == 0 builds the
/// unconditional variant used by transitional steps.
class AffineCoupling {
public:
    AffineCoupling(int64_t channels, int64_t cond_channels, int64_t hidden, Rng& rng);

    Tensor forward(const Tensor& h, const Tensor& u, Tensor& logdet) const;
    Tensor inverse(const Tensor& h, const Tensor& u) const;

    void visit_params(const std::string& prefix, const ParamVisitor& fn);

    CouplingNet& net() { return net_; }

private:
    int64_t channels_, cond_channels_;
    CouplingNet net_;
};

/// Affine transform of every channel and position driven purely by the
/// conditioning features: h' = exp(f_s(u))*h + f_b(u).
class AffineInjector {
public:
    AffineInjector(int64_t channels, int64_t cond_channels, int64_t hidden, Rng& rng);

    Tensor forward(const Tensor& h, const Tensor& u, Tensor& logdet) const;
    Tensor inverse(const Tensor& h, const Tensor& u) const;

    void visit_params(const std::string& prefix, const ParamVisitor& fn);

    CouplingNet& net() { return net_; }

private:
    int64_t channels_;
    CouplingNet net_;
};

/// He-initialized conv weight [out,in,k,k]: N(0, 2/fan_in).
Tensor he_conv_weight(int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng);

}  // namespace flowsr
