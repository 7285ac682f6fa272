#pragma once

#include <string>

#include "flowsr/tensor.hpp"

namespace flowsr {

/// Binary PPM (P6, maxval 255), the project's image format: bit-exact to
/// test, zero dependencies. Reads are tolerant (arbitrary whitespace and
/// '#' comments in the header); writes are canonical ("P6\nW H\n255\n" +
/// raw bytes), so write(read(f)) is byte-identical for canonical files.

/// -> [1,3,H,W], bytes mapped to [0,1] by v/255.
Tensor read_ppm(const std::string& path);

/// Quantizes round(v*255) clamped to [0,255]. Accepts [1,3,H,W].
void write_ppm(const std::string& path, const Tensor& img);

/// The quantization used on output, exposed for tests.
unsigned char quantize8(double v);

}  // namespace flowsr
