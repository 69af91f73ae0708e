// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/inference.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "omni_epi/image.hpp"
#include "omni_epi/ops.hpp"

namespace omni {

using std::int64_t;

void TileSpec::validate() const {
  if (patch < 1 || stride < 1) throw ConfigError("tile patch and stride must be positive");
  if (stride > patch) throw ConfigError("tile stride " + std::to_string(stride) + " exceeds patch " + std::to_string(patch));
  if (margin < 0) throw ConfigError("tile margin must be non-negative");
}

std::vector<int64_t> tile_starts(int64_t n, int64_t patch, int64_t stride) {
  if (n <= patch) return {0};
  std::vector<int64_t> s;
  for (int64_t p = 0; p + patch < n; p += stride) s.push_back(p);
  if (s.back() + patch != n) s.push_back(n - patch);
  return s;
}

std::vector<double> blend_profile(int64_t n, BlendWindow window) {
  std::vector<double> w(static_cast<std::size_t>(n), 1.0);
  if (window == BlendWindow::Hann) {
    for (int64_t i = 0; i < n; ++i)
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  }
  return w;
}

namespace {

struct Tile {
  int64_t y, x, core_h, core_w;
};

std::vector<Tile> tiles_for(int64_t h, int64_t w, const TileSpec& spec) {
  std::vector<Tile> out;
  for (auto y : tile_starts(h, spec.patch, spec.stride))
    for (auto x : tile_starts(w, spec.patch, spec.stride))
      out.push_back({y, x, std::min(spec.patch, h), std::min(spec.patch, w)});
  return out;
}

}  // namespace

std::vector<double> epsw_weight_map(int64_t h, int64_t w, int64_t s, const TileSpec& spec) {
  spec.validate();
  const int64_t sh = h * s, sw = w * s;
  std::vector<double> acc(static_cast<std::size_t>(sh * sw), 0.0);
  for (const auto& t : tiles_for(h, w, spec)) {
    const auto py = blend_profile(t.core_h * s, spec.window), px = blend_profile(t.core_w * s, spec.window);
    for (int64_t i = 0; i < t.core_h * s; ++i)
      for (int64_t j = 0; j < t.core_w * s; ++j) acc[(t.y * s + i) * sw + t.x * s + j] += py[i] * px[j];
  }
  std::vector<double> norm(acc.size(), 0.0);
  for (const auto& t : tiles_for(h, w, spec)) {
    const auto py = blend_profile(t.core_h * s, spec.window), px = blend_profile(t.core_w * s, spec.window);
    for (int64_t i = 0; i < t.core_h * s; ++i)
      for (int64_t j = 0; j < t.core_w * s; ++j) {
        const int64_t k = (t.y * s + i) * sw + t.x * s + j;
        norm[k] += py[i] * px[j] / acc[k];
      }
  }
  return norm;
}

Tensor epsw_infer(const LumaModel& model, const Tensor& lr, int64_t s, const TileSpec& spec) {
  spec.validate();
  if (lr.rank() != 5) throw ShapeError("epsw_infer: expected (B, C, A, h, w), got " + shape_str(lr.shape()));
  NoGradGuard no_grad;
  const int64_t B = lr.dim(0), C = lr.dim(1), A = lr.dim(2), h = lr.dim(3), w = lr.dim(4);
  const int64_t sh = h * s, sw = w * s, planes = B * C * A;
  std::vector<double> acc(static_cast<std::size_t>(planes * sh * sw), 0.0);
  std::vector<double> wsum(static_cast<std::size_t>(sh * sw), 0.0);
  for (const auto& t : tiles_for(h, w, spec)) {
    const int64_t y0 = std::max<int64_t>(0, t.y - spec.margin), y1 = std::min(h, t.y + t.core_h + spec.margin);
    const int64_t x0 = std::max<int64_t>(0, t.x - spec.margin), x1 = std::min(w, t.x + t.core_w + spec.margin);
    const Tensor tile = ops::slice(ops::slice(lr, 3, y0, y1 - y0), 4, x0, x1 - x0);
    const Tensor res = model(tile).to(DType::F64);
    const int64_t th = (y1 - y0) * s, tw = (x1 - x0) * s;
    if (res.shape() != Shape{B, C, A, th, tw})
      throw ShapeError("epsw_infer: model returned " + shape_str(res.shape()) + " for tile " + shape_str(tile.shape()));
    const auto py = blend_profile(t.core_h * s, spec.window), px = blend_profile(t.core_w * s, spec.window);
    const auto r = res.data<double>();
    const int64_t oy = (t.y - y0) * s, ox = (t.x - x0) * s;
    for (int64_t i = 0; i < t.core_h * s; ++i) {
      for (int64_t j = 0; j < t.core_w * s; ++j) {
        const double wt = py[i] * px[j];
        const int64_t k = (t.y * s + i) * sw + t.x * s + j;
        wsum[k] += wt;
        for (int64_t p = 0; p < planes; ++p) acc[p * sh * sw + k] += wt * r[(p * th + oy + i) * tw + ox + j];
      }
    }
  }
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t k = 0; k < sh * sw; ++k) acc[p * sh * sw + k] /= wsum[k];
  return Tensor::from_vector({B, C, A, sh, sw}, acc, lr.dtype());
}

Tensor tta_infer(const LumaModel& model, const LightField& lr, bool* fell_back) {
  NoGradGuard no_grad;
  const bool square = lr.u() == lr.v();
  if (fell_back) *fell_back = !square;
  Tensor acc;
  int count = 0;
  for (const auto& g : Dihedral::all()) {
    if (g.transpose && !square) continue;
    const LightField in = apply_dihedral(lr, g);
    const LightField out = apply_dihedral(in.with(model(in.tensor())), g.inverse());
    acc = acc.defined() ? ops::add(acc, out.tensor()) : out.tensor();
    ++count;
  }
  return ops::scale(acc, 1.0 / count);
}

// ---------------------------------------------------------------------------

double psnr(const double* a, const double* b, int64_t n) {
  double sse = 0.0;
  for (int64_t i = 0; i < n; ++i) sse += (a[i] - b[i]) * (a[i] - b[i]);
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(n) / sse);
}

namespace {

/// Valid separable filtering of an (h, w) plane with a normalised 1D kernel.
std::vector<double> filter_valid(const std::vector<double>& x, int64_t h, int64_t w, const std::vector<double>& k) {
  const auto n = static_cast<int64_t>(k.size());
  const int64_t oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h * ow), 0.0), out(static_cast<std::size_t>(oh * ow), 0.0);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int64_t t = 0; t < n; ++t) s += k[t] * x[i * w + j + t];
      tmp[i * ow + j] = s;
    }
  for (int64_t i = 0; i < oh; ++i)
    for (int64_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int64_t t = 0; t < n; ++t) s += k[t] * tmp[(i + t) * ow + j];
      out[i * ow + j] = s;
    }
  return out;
}

}  // namespace

double ssim(const double* a, const double* b, int64_t h, int64_t w) {
  constexpr double K1 = 0.01, K2 = 0.03, L = 1.0, sigma = 1.5;
  const double C1 = (K1 * L) * (K1 * L), C2 = (K2 * L) * (K2 * L);
  int64_t n = std::min<int64_t>({11, h, w});
  if (n % 2 == 0) --n;
  if (n < 1) throw ShapeError("ssim: empty image");
  std::vector<double> k(static_cast<std::size_t>(n));
  double ksum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i - n / 2);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    ksum += k[i];
  }
  for (auto& v : k) v /= ksum;
  const auto N = static_cast<std::size_t>(h * w);
  std::vector<double> va(a, a + N), vb(b, b + N), aa(N), bb(N), ab(N);
  for (std::size_t i = 0; i < N; ++i) {
    aa[i] = va[i] * va[i];
    bb[i] = vb[i] * vb[i];
    ab[i] = va[i] * vb[i];
  }
  const auto mu_a = filter_valid(va, h, w, k), mu_b = filter_valid(vb, h, w, k);
  const auto s_aa = filter_valid(aa, h, w, k), s_bb = filter_valid(bb, h, w, k), s_ab = filter_valid(ab, h, w, k);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va2 = s_aa[i] - ma * ma, vb2 = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
    total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va2 + vb2 + C2));
  }
  return total / static_cast<double>(mu_a.size());
}

MetricReport evaluate_y(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) throw ShapeError("metrics: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  if (pred.rank() != 5 || pred.dim(1) != 1)
    throw ShapeError("metrics expect (B, 1, A, H, W) luminance, got " + shape_str(pred.shape()));
  const Tensor p = pred.to(DType::F64), g = gt.to(DType::F64);
  const int64_t B = p.dim(0), A = p.dim(2), H = p.dim(3), W = p.dim(4);
  MetricReport rep;
  for (int64_t b = 0; b < B; ++b) {
    double sp = 0.0, ss = 0.0;
    for (int64_t a = 0; a < A; ++a) {
      const double* x = p.data<double>().data() + (b * A + a) * H * W;
      const double* y = g.data<double>().data() + (b * A + a) * H * W;
      ViewMetric m{b, a, psnr(x, y, H * W), ssim(x, y, H, W)};
      sp += m.psnr;
      ss += m.ssim;
      rep.rows.push_back(m);
    }
    rep.mean_psnr += sp / static_cast<double>(A);
    rep.mean_ssim += ss / static_cast<double>(A);
  }
  rep.mean_psnr /= static_cast<double>(B);
  rep.mean_ssim /= static_cast<double>(B);
  return rep;
}

double psnr_y(const Tensor& pred, const Tensor& gt) { return evaluate_y(pred, gt).mean_psnr; }
double ssim_y(const Tensor& pred, const Tensor& gt) { return evaluate_y(pred, gt).mean_ssim; }

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string MetricReport::to_text() const {
  std::string out = "scene,view,psnr,ssim\n";
  for (const auto& r : rows)
    out += std::to_string(r.scene) + "," + std::to_string(r.view) + "," + format_metric(r.psnr) + "," +
           format_metric(r.ssim) + "\n";
  out += "mean,all," + format_metric(mean_psnr) + "," + format_metric(mean_ssim) + "\n";
  return out;
}

Tensor super_resolve(const LumaModel& model, const Tensor& lr, int64_t scale) {
  if (lr.rank() != 5 || (lr.dim(1) != 1 && lr.dim(1) != 3))
    throw ShapeError("super_resolve: expected (B, 1 or 3, A, H, W), got " + shape_str(lr.shape()));
  NoGradGuard no_grad;
  if (lr.dim(1) == 1) return ops::clamp(model(lr), 0.0, 1.0);
  const Tensor ycc = image::rgb_to_ycbcr(lr, 1);
  const Tensor y = model(ops::slice(ycc, 1, 0, 1));
  const Tensor chroma = image::bicubic_resize(ops::slice(ycc, 1, 1, 2), lr.dim(3) * scale, lr.dim(4) * scale);
  const Tensor parts[] = {y, chroma};
  return ops::clamp(image::ycbcr_to_rgb(ops::concat(parts, 1), 1), 0.0, 1.0);
}

}  // namespace omni
