#pragma once

#include <vector>

#include "flowsr/tape.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {
namespace ops {

// Differentiable op set. Every function computes its result eagerly and,
// when a tape is active and an input requires grad, records a backward
// closure. Inverse passes run the same functions under NoGradGuard and
// simply skip recording.

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor exp(const Tensor& a);
/// Natural log; throws DomainError on any non-positive element.
Tensor log(const Tensor& a);
/// log|x|; throws DomainError on any zero element.
Tensor log_abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor abs(const Tensor& a);

/// a + s with s a single-element tensor broadcast over a.
Tensor add_bcast(const Tensor& a, const Tensor& s);

// reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sample variance (n-1 denominator); DomainError if numel < 2.
Tensor var(const Tensor& a);
/// [B,C,H,W] -> [B], summing over channels and positions.
Tensor sum_per_batch(const Tensor& a);

// per-channel affine pieces over [B,C,H,W]
Tensor channel_scale(const Tensor& h, const Tensor& s);  // s: [C]
Tensor channel_shift(const Tensor& h, const Tensor& b);  // b: [C]

// layout
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Channels [c0, c1) of a [B,C,H,W] tensor.
Tensor slice_channels(const Tensor& a, int64_t c0, int64_t c1);
/// [B,C,H,W] -> [B,4C,H/2,W/2]; output channel 4c+k holds the k-th
/// position of each 2x2 cell of input channel c, in order top-left,
/// top-right, bottom-left, bottom-right. ShapeError on odd H or W.
Tensor squeeze2x2(const Tensor& a);
/// Exact inverse of squeeze2x2; ShapeError unless C divides by 4.
Tensor unsqueeze2x2(const Tensor& a);
/// Bilinear resize with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& a, int64_t h_out, int64_t w_out);

// dense compute
/// 2-D convolution, stride 1, zero padding. input [B,Cin,H,W],
/// weight [Cout,Cin,kh,kw], bias [Cout] or a default-constructed Tensor
/// for none. Output spatial size H + 2p - kh + 1 (and likewise for W).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int64_t padding);
/// Per-pixel channel mixing: out[b,:,y,x] = W @ in[b,:,y,x], W square [C,C].
Tensor channel_transform(const Tensor& h, const Tensor& w);
/// log|det W| of a square matrix tensor [C,C] as a scalar, with the
/// inverse-transpose backward rule. SingularError when |det| underflows.
Tensor logabsdet(const Tensor& w);

}  // namespace ops
}  // namespace flowsr
