// SPDX-License-Identifier: Apache-2.0
//
// Layered synthetic light fields with known disparity, and an EPI slope
// estimator to measure it back.

#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "omni_epi/geometry.hpp"

namespace omni {

struct SceneLayer {
  /// Row-major (channels, tex_h, tex_w) texture and (tex_h, tex_w) opacity in
  /// [0, 1]. The texture is centred on the view; it must cover the view plus
  /// the largest translation.
  std::vector<double> texture;
  std::vector<double> mask;
  std::int64_t tex_h = 0;
  std::int64_t tex_w = 0;
  /// Pixels of shift per angular step.
  double disparity = 0.0;
};

struct SyntheticScene {
  /// Back to front.
  std::vector<SceneLayer> layers;
  std::int64_t u = 5, v = 5, height = 32, width = 32, channels = 3;
};

enum class TextureStyle { Smooth, Blocks };

struct SceneRecipe {
  std::int64_t u = 5, v = 5;
  /// HR view size.
  std::int64_t height = 64, width = 64;
  std::int64_t channels = 3;
  std::vector<double> disparities{0.0};
  /// Texture feature size in HR pixels.
  std::int64_t cell = 4;
  TextureStyle style = TextureStyle::Blocks;
};

/// Random textures and, above the first layer, random rectangular occluders.
SyntheticScene make_scene(const SceneRecipe& recipe, std::uint64_t seed);

/// (1, channels, U*V, H, W) in 64-bit; view (u, v) shows each layer translated
/// by (d*(u - uc), d*(v - vc)) with (uc, vc) the centre view, composited back
/// to front with bicubic sub-pixel sampling.
Tensor render_scene(const SyntheticScene& scene);

struct SyntheticPair {
  Tensor hr;
  Tensor lr;
};

/// Renders the HR light field of a fresh scene and downsamples every view by
/// `scale` with the bicubic kernel.
SyntheticPair gen_synthetic_lf(const SceneRecipe& recipe, std::int64_t scale, std::uint64_t seed);

/// Dominant per-step shift along the spatial axis between consecutive angular
/// rows of the EPIs in each direction. Throws NumericError on textureless input.
std::map<EpiDirection, std::int64_t> verify_epi_slope(const LightField& lf, std::int64_t max_shift = 4);

}  // namespace omni
