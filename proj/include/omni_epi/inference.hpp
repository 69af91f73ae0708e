// SPDX-License-Identifier: Apache-2.0
//
// Tiled overlap-blended inference, dihedral test-time augmentation and
// luminance quality metrics.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "omni_epi/geometry.hpp"

namespace omni {

/// Maps a low-resolution luminance light field (B, 1, U*V, h, w) to
/// (B, 1, U*V, a*h, a*w).
using LumaModel = std::function<Tensor(const Tensor&)>;

enum class BlendWindow { Uniform, Hann };

struct TileSpec {
  std::int64_t patch = 32;
  std::int64_t stride = 16;
  /// LR context added on every side of a tile where the image allows; only
  /// the tile core contributes to the output.
  std::int64_t margin = 4;
  BlendWindow window = BlendWindow::Hann;

  void validate() const;
};

/// Tile starts along an axis of length n: stride steps, the last tile aligned
/// to the end. A single full-length tile when n <= patch.
std::vector<std::int64_t> tile_starts(std::int64_t n, std::int64_t patch, std::int64_t stride);
/// Blend profile over a tile core of `n` HR samples; strictly positive.
std::vector<double> blend_profile(std::int64_t n, BlendWindow window);

/// Normalised accumulated blend weight at every HR pixel of an (h, w) LR
/// image; ones by construction.
std::vector<double> epsw_weight_map(std::int64_t h, std::int64_t w, std::int64_t scale, const TileSpec& spec);

Tensor epsw_infer(const LumaModel& model, const Tensor& lr, std::int64_t scale, const TileSpec& spec);

/// Mean of g^-1(model(g(lr))) over the dihedral group; the four
/// non-transposing elements when U != V (sets *fell_back).
Tensor tta_infer(const LumaModel& model, const LightField& lr, bool* fell_back = nullptr);

/// Grey or RGB (B, C, A, h, w) -> clamped (B, C, A, a*h, a*w). Only the
/// luminance goes through `model`; chroma is bicubic-upsampled.
Tensor super_resolve(const LumaModel& model, const Tensor& lr, std::int64_t scale);

struct ViewMetric {
  std::int64_t scene = 0;
  std::int64_t view = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ViewMetric> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  /// `scene,view,psnr,ssim` lines plus a final `mean,...` row; infinite PSNR
  /// is written as "inf".
  std::string to_text() const;
};

/// 10 log10(1 / MSE) for data in [0, 1]; +inf when identical.
double psnr(const double* a, const double* b, std::int64_t n);
/// Single-scale SSIM, 11x11 Gaussian window with sigma 1.5, K1 0.01, K2 0.03,
/// L 1, averaged over the valid window positions. The window shrinks to the
/// largest odd size that fits smaller images.
double ssim(const double* a, const double* b, std::int64_t h, std::int64_t w);

/// pred, gt: (B, 1, A, H, W) luminance. PSNR is averaged over views, then
/// over scenes (batch entries).
MetricReport evaluate_y(const Tensor& pred, const Tensor& gt);
double psnr_y(const Tensor& pred, const Tensor& gt);
double ssim_y(const Tensor& pred, const Tensor& gt);

std::string format_metric(double v);

}  // namespace omni
