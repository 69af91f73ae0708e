// SPDX-License-Identifier: Apache-2.0
//
// Bicubic resampling and colour conversion, both as differentiable ops.

#pragma once

#include <cstdint>

#include "omni_epi/ops.hpp"
#include "omni_epi/tensor.hpp"

namespace omni::image {

/// Keys cubic convolution kernel.
double keys_cubic(double x, double a = -0.5);

/// Resampling matrix mapping `in` samples to `out` samples with pixel-centre
/// alignment (src = (i + 0.5) * in / out - 0.5) and edge-clamped taps. No
/// prefilter is applied when downsampling.
ops::ResampleMatrix bicubic_matrix(std::int64_t in, std::int64_t out);

/// Resizes the last two axes to (out_h, out_w).
Tensor bicubic_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

/// BT.601 full-range conversion (Kr = 0.299, Kb = 0.114), chroma offset 0.5.
/// `axis` holds the three colour channels.
Tensor rgb_to_ycbcr(const Tensor& rgb, int axis);
Tensor ycbcr_to_rgb(const Tensor& ycbcr, int axis);

}  // namespace omni::image
