// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "omni_epi/image.hpp"

namespace omni {

using std::int64_t;

namespace {

std::vector<double> random_texture(int64_t ch, int64_t th, int64_t tw, int64_t cell, TextureStyle style,
                                   std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int64_t gh = th / cell + 2, gw = tw / cell + 2;
  std::vector<double> grid(static_cast<std::size_t>(ch * gh * gw));
  for (auto& g : grid) g = uni(rng);
  std::vector<double> tex(static_cast<std::size_t>(ch * th * tw));
  if (style == TextureStyle::Blocks) {
    for (int64_t c = 0; c < ch; ++c)
      for (int64_t y = 0; y < th; ++y)
        for (int64_t x = 0; x < tw; ++x) tex[(c * th + y) * tw + x] = grid[(c * gh + y / cell) * gw + x / cell];
    return tex;
  }
  const Tensor g = Tensor::from_vector({ch, gh, gw}, grid, DType::F64);
  const Tensor up = image::bicubic_resize(g, gh * cell, gw * cell);
  const auto d = up.data<double>();
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < th; ++y)
      for (int64_t x = 0; x < tw; ++x)
        tex[(c * th + y) * tw + x] = std::clamp(d[(c * gh * cell + y) * gw * cell + x], 0.0, 1.0);
  return tex;
}

/// Bicubic sample of a (rows, cols) plane at (y, x) with edge clamping; exact
/// at integer positions.
double sample(const double* plane, int64_t rows, int64_t cols, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const auto iy = static_cast<int64_t>(fy), ix = static_cast<int64_t>(fx);
  auto at = [&](int64_t r, int64_t c) {
    return plane[std::clamp<int64_t>(r, 0, rows - 1) * cols + std::clamp<int64_t>(c, 0, cols - 1)];
  };
  if (fy == y && fx == x) return at(iy, ix);
  double acc = 0.0;
  for (int64_t r = iy - 1; r <= iy + 2; ++r) {
    const double wy = image::keys_cubic(y - static_cast<double>(r));
    if (wy == 0.0) continue;
    for (int64_t c = ix - 1; c <= ix + 2; ++c) {
      const double wx = image::keys_cubic(x - static_cast<double>(c));
      if (wx != 0.0) acc += wy * wx * at(r, c);
    }
  }
  return acc;
}

}  // namespace

SyntheticScene make_scene(const SceneRecipe& r, std::uint64_t seed) {
  if (r.u < 1 || r.v < 1 || r.height < 1 || r.width < 1 || r.channels < 1 || r.cell < 1)
    throw ContractError("scene recipe extents must be positive");
  if (r.disparities.empty()) throw ContractError("scene recipe needs at least one layer");
  std::mt19937_64 rng(seed);
  SyntheticScene s;
  s.u = r.u;
  s.v = r.v;
  s.height = r.height;
  s.width = r.width;
  s.channels = r.channels;
  const double reach = std::max(r.u, r.v) / 2.0;
  for (std::size_t li = 0; li < r.disparities.size(); ++li) {
    SceneLayer layer;
    layer.disparity = r.disparities[li];
    const auto margin = static_cast<int64_t>(std::ceil(std::fabs(layer.disparity) * reach)) + 3;
    layer.tex_h = r.height + 2 * margin;
    layer.tex_w = r.width + 2 * margin;
    layer.texture = random_texture(r.channels, layer.tex_h, layer.tex_w, r.cell, r.style, rng);
    layer.mask.assign(static_cast<std::size_t>(layer.tex_h * layer.tex_w), li == 0 ? 1.0 : 0.0);
    if (li > 0) {
      std::uniform_int_distribution<int64_t> size_h(r.height / 4 + 1, r.height / 2 + 1);
      std::uniform_int_distribution<int64_t> size_w(r.width / 4 + 1, r.width / 2 + 1);
      const int64_t bh = size_h(rng), bw = size_w(rng);
      std::uniform_int_distribution<int64_t> top(margin, margin + r.height - bh);
      std::uniform_int_distribution<int64_t> left(margin, margin + r.width - bw);
      const int64_t y0 = top(rng), x0 = left(rng);
      for (int64_t y = y0; y < y0 + bh; ++y)
        for (int64_t x = x0; x < x0 + bw; ++x) layer.mask[y * layer.tex_w + x] = 1.0;
    }
    s.layers.push_back(std::move(layer));
  }
  return s;
}

Tensor render_scene(const SyntheticScene& s) {
  const int64_t A = s.u * s.v, H = s.height, W = s.width, C = s.channels;
  std::vector<double> out(static_cast<std::size_t>(C * A * H * W), 0.0);
  const double uc = (static_cast<double>(s.u) - 1.0) / 2.0, vc = (static_cast<double>(s.v) - 1.0) / 2.0;
  for (const auto& layer : s.layers) {
    const int64_t my = (layer.tex_h - H) / 2, mx = (layer.tex_w - W) / 2;
    if (static_cast<int64_t>(layer.texture.size()) != C * layer.tex_h * layer.tex_w ||
        static_cast<int64_t>(layer.mask.size()) != layer.tex_h * layer.tex_w)
      throw ShapeError("scene layer texture does not match its extents");
    for (int64_t u = 0; u < s.u; ++u) {
      for (int64_t v = 0; v < s.v; ++v) {
        const double dy = layer.disparity * (static_cast<double>(u) - uc);
        const double dx = layer.disparity * (static_cast<double>(v) - vc);
        const int64_t a = u * s.v + v;
        for (int64_t h = 0; h < H; ++h) {
          for (int64_t w = 0; w < W; ++w) {
            const double sy = static_cast<double>(h + my) - dy, sx = static_cast<double>(w + mx) - dx;
            const double alpha =
                std::clamp(sample(layer.mask.data(), layer.tex_h, layer.tex_w, sy, sx), 0.0, 1.0);
            if (alpha == 0.0) continue;
            for (int64_t c = 0; c < C; ++c) {
              const double t = sample(layer.texture.data() + c * layer.tex_h * layer.tex_w, layer.tex_h,
                                      layer.tex_w, sy, sx);
              double& o = out[((c * A + a) * H + h) * W + w];
              o = alpha * t + (1.0 - alpha) * o;
            }
          }
        }
      }
    }
  }
  for (auto& o : out) o = std::clamp(o, 0.0, 1.0);
  return Tensor::from_vector({1, C, A, H, W}, out, DType::F64);
}

SyntheticPair gen_synthetic_lf(const SceneRecipe& recipe, int64_t scale, std::uint64_t seed) {
  if (scale < 1 || recipe.height % scale || recipe.width % scale)
    throw ContractError("HR size must be divisible by the scale factor");
  SyntheticPair p;
  p.hr = render_scene(make_scene(recipe, seed));
  p.lr = image::bicubic_resize(p.hr, recipe.height / scale, recipe.width / scale);
  return p;
}

std::map<EpiDirection, int64_t> verify_epi_slope(const LightField& lf, int64_t max_shift) {
  std::vector<EpiView> views{to_horizontal_epi(lf), to_vertical_epi(lf)};
  if (lf.u() == lf.v()) {
    auto [d45, d135] = extract_diagonals(lf);
    views.push_back(d45);
    views.push_back(d135);
  }
  std::map<EpiDirection, int64_t> result;
  for (const auto& view : views) {
    const Tensor t = view.tensor.to(DType::F64);
    const auto x = t.data<double>();
    const int64_t P = t.dim(3), Q = t.dim(4), slices = t.numel() / (P * Q);
    double mean = 0.0, var = 0.0;
    for (double e : x) mean += e;
    mean /= static_cast<double>(x.size());
    for (double e : x) var += (e - mean) * (e - mean);
    if (var / static_cast<double>(x.size()) < 1e-12)
      throw NumericError(std::string("textureless ") + direction_name(view.direction) + " EPIs");
    if (P < 2) {
      result[view.direction] = 0;
      continue;
    }
    const int64_t smax = std::min(max_shift, Q - 1);
    int64_t best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (int64_t s = -smax; s <= smax; ++s) {
      double sse = 0.0;
      int64_t n = 0;
      for (int64_t k = 0; k < slices; ++k) {
        const double* e = x.data() + k * P * Q;
        for (int64_t p = 0; p + 1 < P; ++p) {
          for (int64_t q = std::max<int64_t>(0, -s); q < std::min(Q, Q - s); ++q) {
            const double diff = e[(p + 1) * Q + q + s] - e[p * Q + q];
            sse += diff * diff;
            ++n;
          }
        }
      }
      const double score = sse / static_cast<double>(std::max<int64_t>(n, 1));
      if (score < best_score) {
        best_score = score;
        best = s;
      }
    }
    result[view.direction] = best;
  }
  return result;
}

}  // namespace omni
