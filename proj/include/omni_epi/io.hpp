// SPDX-License-Identifier: Apache-2.0
//
// Light-field bundles on disk. A bundle is a directory holding one image per
// sub-aperture view plus manifest.txt:
//
//   angular_u=5
//   angular_v=5
//   channels=3
//   format=png16
//   height=128
//   width=128
//   meta.<key>=<value>          (optional, free-form)
//   view <u> <v> <file name>    (one line per view)
//
// Formats: png8, png16 (grey or RGB) and pgm8, pgm16 (grey only).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omni_epi/config.hpp"
#include "omni_epi/tensor.hpp"

namespace omni {

struct Image {
  std::int64_t height = 0, width = 0, channels = 1;
  /// Row-major interleaved samples in [0, 1].
  std::vector<double> data;
};

void write_png(const std::string& path, const Image& img, int bit_depth);
Image read_png(const std::string& path);
void write_pgm(const std::string& path, const Image& img, int bit_depth);
Image read_pgm(const std::string& path);
/// Dispatches on the file extension.
Image read_image(const std::string& path);

struct Bundle {
  /// (1, channels, U*V, H, W).
  Tensor tensor;
  std::int64_t u = 0, v = 0;
  KeyValues meta;
};

void write_bundle(const std::string& dir, const Bundle& b, const std::string& format = "png16");
Bundle read_bundle(const std::string& dir);

}  // namespace omni
