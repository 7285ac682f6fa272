#pragma once

#include <vector>

#include "flowsr/conditioning.hpp"
#include "flowsr/tensor.hpp"

namespace flowsr {

/// 10*log10(peak^2 / MSE) over every element of [B,C,H,W] stacks.
/// Identical inputs return +infinity.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

/// Mean local SSIM between two image stacks, averaged over the batch.
/// RGB input is reduced to luma first (ITU-R 601 weights); windows are
/// 11x11 Gaussian (sigma 1.5) over valid positions only, K1=0.01,
/// K2=0.03, dynamic range 1. Images smaller than the window are
/// rejected.
double ssim(const Tensor& a, const Tensor& b);

/// Consistency with the LR input: psnr(downscale(y_sr, kernel), x_lr).
double lr_psnr(const Tensor& y_sr, const Tensor& x_lr, const DownscaleKernel& kernel);

/// Sample spread: per-pixel standard deviation across the samples (n-1
/// divisor), averaged over pixels and channels, reported on the 0-255
/// scale. Needs at least two samples of identical shape.
double diversity_sigma(const std::vector<Tensor>& samples);

}  // namespace flowsr
