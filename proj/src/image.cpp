// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace omni::image {

using std::int64_t;

double keys_cubic(double x, double a) {
  x = std::fabs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

ops::ResampleMatrix bicubic_matrix(int64_t in, int64_t out) {
  if (in < 1 || out < 1)
    throw ContractError("bicubic: non-positive size " + std::to_string(in) + " -> " + std::to_string(out));
  ops::ResampleMatrix m;
  m.in = in;
  m.out = out;
  m.rows.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t i = 0; i < out; ++i) {
    const double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    const int64_t base = static_cast<int64_t>(std::floor(src));
    auto& row = m.rows[i];
    for (int64_t k = base - 1; k <= base + 2; ++k) {
      const double w = keys_cubic(src - static_cast<double>(k));
      if (w == 0.0) continue;
      const int64_t c = std::clamp<int64_t>(k, 0, in - 1);
      auto it = std::find_if(row.begin(), row.end(), [c](const auto& e) { return e.first == c; });
      if (it == row.end())
        row.emplace_back(c, w);
      else
        it->second += w;
    }
  }
  return m;
}

Tensor bicubic_resize(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() < 2) throw ShapeError("bicubic_resize: need at least 2 axes");
  Tensor t = x;
  if (out_h != x.dim(-2)) t = ops::resample(t, -2, bicubic_matrix(x.dim(-2), out_h));
  if (out_w != x.dim(-1)) t = ops::resample(t, -1, bicubic_matrix(x.dim(-1), out_w));
  if (out_h == x.dim(-2) && out_w == x.dim(-1)) t = ops::reshape(x, x.shape());
  return t;
}

namespace {

constexpr double kKr = 0.299;
constexpr double kKb = 0.114;
constexpr double kKg = 1.0 - kKr - kKb;

ops::ResampleMatrix dense3(const double (&m)[3][3]) {
  ops::ResampleMatrix r;
  r.in = r.out = 3;
  r.rows.resize(3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.rows[i].emplace_back(j, m[i][j]);
  return r;
}

Tensor offset_tensor(const Tensor& like, int axis, double a, double b, double c) {
  Shape s(static_cast<std::size_t>(like.rank()), 1);
  if (axis < 0) axis += like.rank();
  s[axis] = 3;
  return Tensor::from_vector(s, {a, b, c}, like.dtype());
}

void check_channels(const Tensor& x, int axis) {
  if (x.dim(axis) != 3) throw ShapeError("colour conversion needs 3 channels, got " + shape_str(x.shape()));
}

}  // namespace

Tensor rgb_to_ycbcr(const Tensor& rgb, int axis) {
  check_channels(rgb, axis);
  const double cb = 0.5 / (1.0 - kKb), cr = 0.5 / (1.0 - kKr);
  const double m[3][3] = {
      {kKr, kKg, kKb},
      {-kKr * cb, -kKg * cb, (1.0 - kKb) * cb},
      {(1.0 - kKr) * cr, -kKg * cr, -kKb * cr},
  };
  return ops::add(ops::resample(rgb, axis, dense3(m)), offset_tensor(rgb, axis, 0.0, 0.5, 0.5));
}

Tensor ycbcr_to_rgb(const Tensor& ycbcr, int axis) {
  check_channels(ycbcr, axis);
  const double r_cr = 2.0 * (1.0 - kKr);
  const double b_cb = 2.0 * (1.0 - kKb);
  const double m[3][3] = {
      {1.0, 0.0, r_cr},
      {1.0, -kKb * b_cb / kKg, -kKr * r_cr / kKg},
      {1.0, b_cb, 0.0},
  };
  return ops::resample(ops::add(ycbcr, offset_tensor(ycbcr, axis, 0.0, -0.5, -0.5)), axis, dense3(m));
}

}  // namespace omni::image
