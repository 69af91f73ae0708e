// SPDX-License-Identifier: Apache-2.0
//
// The closed operation set. Every op records a backward closure when any
// input participates in a graph; all kernels are deterministic.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "omni_epi/tensor.hpp"

namespace omni::ops {

// Elementwise, numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);

/// Batched product over equal leading dims; b may be rank 2 and shared.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
/// x (..., in) times weight (out, in)^T plus optional bias (out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor gather(const Tensor& a, int axis, const std::vector<std::int64_t>& index);
/// Zero tensor with `size` entries along `axis`, src slices added at index.
/// Repeated indices accumulate.
Tensor scatter_add(const Tensor& src, int axis, const std::vector<std::int64_t>& index,
                   std::int64_t size);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdim);
Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdim);

struct ConvOptions {
  std::array<std::int64_t, 3> dilation{1, 1, 1};
  std::int64_t groups = 1;
};

/// x (N, Cin, D, H, W), weight (Cout, Cin/groups, kd, kh, kw) with odd
/// extents, bias (Cout) or undefined. Zero padding, "same" output extent.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions opt = {});

/// Softmax over the last axis with max subtraction.
Tensor softmax(const Tensor& a);
/// Softmax over the last axis of (..., L, L) scores; allowed is a row-major
/// L x L mask (nonzero = attend). A fully masked row is a contract error.
Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& allowed);

/// Normalizes over the last axis, then applies per-channel gamma and beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Sparse linear map along one axis: out[r] = sum_c w(r, c) in[c].
struct ResampleMatrix {
  std::int64_t in = 0;
  std::int64_t out = 0;
  std::vector<std::vector<std::pair<std::int64_t, double>>> rows;
};
Tensor resample(const Tensor& x, int axis, const ResampleMatrix& m);

}  // namespace omni::ops
