// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "omni_epi/image.hpp"
#include "omni_epi/inference.hpp"
#include "omni_epi/io.hpp"
#include "omni_epi/synthetic.hpp"

using namespace omni;
using std::int64_t;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
  for (auto& x : v) x = uni(rng);
  return Tensor::from_vector(s, v, DType::F64);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  REQUIRE(x.size() == y.size());
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i] - y[i]));
  return m;
}

LumaModel bicubic_model(int64_t s) {
  return [s](const Tensor& x) { return image::bicubic_resize(x, x.dim(3) * s, x.dim(4) * s); };
}

LumaModel nearest_model(int64_t s) {
  return [s](const Tensor& x) {
    const int64_t B = x.dim(0), C = x.dim(1), A = x.dim(2), h = x.dim(3), w = x.dim(4);
    std::vector<double> out(static_cast<std::size_t>(B * C * A * h * s * w * s));
    const auto v = x.to_vector();
    for (int64_t p = 0; p < B * C * A; ++p)
      for (int64_t i = 0; i < h * s; ++i)
        for (int64_t j = 0; j < w * s; ++j) out[(p * h * s + i) * w * s + j] = v[(p * h + i / s) * w + j / s];
    return Tensor::from_vector({B, C, A, h * s, w * s}, out, x.dtype());
  };
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("omni_epi_test_inference_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("bicubic preserves constants and is the identity at equal size") {
  const Tensor c = Tensor::full({1, 1, 2, 5, 7}, 0.37, DType::F64);
  for (double v : image::bicubic_resize(c, 20, 28).to_vector()) CHECK(v == doctest::Approx(0.37).epsilon(1e-14));
  const Tensor x = random_tensor({1, 2, 3, 6, 5}, 1);
  CHECK(max_abs_diff(image::bicubic_resize(x, 6, 5), x) < 1e-15);
}

TEST_CASE("bicubic reproduces linear ramps away from the border") {
  const int64_t h = 12, w = 12, s = 3;
  std::vector<double> v(h * w);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) v[i * w + j] = 0.02 * i + 0.05 * j;
  const Tensor up = image::bicubic_resize(Tensor::from_vector({1, 1, 1, h, w}, v, DType::F64), h * s, w * s);
  for (int64_t i = 3 * s; i < (h - 3) * s; ++i)
    for (int64_t j = 3 * s; j < (w - 3) * s; ++j) {
      const double si = (i + 0.5) / s - 0.5, sj = (j + 0.5) / s - 0.5;
      CHECK(up.at({0, 0, 0, i, j}) == doctest::Approx(0.02 * si + 0.05 * sj).epsilon(1e-12));
    }
}

TEST_CASE("keys kernel") {
  CHECK(image::keys_cubic(0.0) == 1.0);
  CHECK(image::keys_cubic(1.0) == 0.0);
  CHECK(image::keys_cubic(2.0) == 0.0);
  CHECK(image::keys_cubic(2.5) == 0.0);
  for (double t : {0.1, 0.3, 0.5, 0.77}) {
    double sum = 0.0;
    for (int k = -2; k <= 2; ++k) sum += image::keys_cubic(t + k);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("YCbCr conversion") {
  const Tensor white = Tensor::full({1, 3, 1, 1, 1}, 1.0, DType::F64);
  const auto w = image::rgb_to_ycbcr(white, 1).to_vector();
  CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(w[2] == doctest::Approx(0.5).epsilon(1e-14));
  const auto k = image::rgb_to_ycbcr(Tensor::zeros({1, 3, 1, 1, 1}, DType::F64), 1).to_vector();
  CHECK(k[0] == 0.0);
  CHECK(k[1] == doctest::Approx(0.5).epsilon(1e-14));
  const auto red = image::rgb_to_ycbcr(Tensor::from_vector({1, 3, 1, 1, 1}, {1, 0, 0}, DType::F64), 1).to_vector();
  CHECK(red[0] == doctest::Approx(0.299).epsilon(1e-14));
  CHECK(red[2] == doctest::Approx(1.0).epsilon(1e-14));
  const Tensor x = random_tensor({2, 3, 4, 3, 3}, 2);
  CHECK(max_abs_diff(image::ycbcr_to_rgb(image::rgb_to_ycbcr(x, 1), 1), x) < 1e-14);
}

TEST_CASE("tile starts cover the axis") {
  CHECK(tile_starts(10, 32, 16) == std::vector<int64_t>{0});
  CHECK(tile_starts(32, 32, 16) == std::vector<int64_t>{0});
  CHECK(tile_starts(40, 32, 16) == std::vector<int64_t>{0, 8});
  CHECK(tile_starts(64, 32, 16) == std::vector<int64_t>{0, 16, 32});
  CHECK(tile_starts(50, 16, 16) == std::vector<int64_t>{0, 16, 32, 34});
  TileSpec bad;
  bad.stride = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("blending weights form a partition of unity") {
  for (auto window : {BlendWindow::Hann, BlendWindow::Uniform})
    for (int64_t h : {7, 20, 37}) {
      TileSpec spec;
      spec.patch = 8;
      spec.stride = 5;
      spec.window = window;
      for (double v : epsw_weight_map(h, 23, 2, spec)) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
      for (double v : blend_profile(10, window)) CHECK(v > 0.0);
    }
}

TEST_CASE("tiled inference of local models equals whole-image inference") {
  const Tensor lr = random_tensor({1, 1, 4, 21, 18}, 3);
  for (auto window : {BlendWindow::Hann, BlendWindow::Uniform}) {
    TileSpec spec;
    spec.patch = 8;
    spec.stride = 5;
    spec.margin = 3;
    spec.window = window;
    CHECK(max_abs_diff(epsw_infer(nearest_model(3), lr, 3, spec), nearest_model(3)(lr)) < 1e-14);
    CHECK(max_abs_diff(epsw_infer(bicubic_model(2), lr, 2, spec), bicubic_model(2)(lr)) < 1e-13);
  }
}

TEST_CASE("tiled inference is linear for linear models") {
  const Tensor a = random_tensor({1, 1, 2, 13, 11}, 4), b = random_tensor({1, 1, 2, 13, 11}, 5);
  TileSpec spec;
  spec.patch = 6;
  spec.stride = 4;
  spec.margin = 0;
  const auto model = bicubic_model(2);
  const Tensor lhs = epsw_infer(model, ops::add(ops::scale(a, 0.3), ops::scale(b, -1.7)), 2, spec);
  const Tensor rhs = ops::add(ops::scale(epsw_infer(model, a, 2, spec), 0.3), ops::scale(epsw_infer(model, b, 2, spec), -1.7));
  CHECK(max_abs_diff(lhs, rhs) < 1e-13);
}

TEST_CASE("a single tile degenerates to a plain model call") {
  const Tensor lr = random_tensor({1, 1, 3, 7, 9}, 6);
  int calls = 0;
  LumaModel counting = [&](const Tensor& x) {
    ++calls;
    return bicubic_model(2)(x);
  };
  TileSpec spec;
  CHECK(max_abs_diff(epsw_infer(counting, lr, 2, spec), bicubic_model(2)(lr)) < 1e-15);
  CHECK(calls == 1);
  LumaModel wrong = [](const Tensor& x) { return x; };
  CHECK_THROWS_AS(epsw_infer(wrong, lr, 2, spec), ShapeError);
}

TEST_CASE("TTA leaves equivariant models unchanged") {
  const LightField lf(random_tensor({1, 1, 9, 6, 6}, 7), 3, 3);
  bool fell_back = true;
  CHECK(max_abs_diff(tta_infer(bicubic_model(2), lf, &fell_back), bicubic_model(2)(lf.tensor())) < 1e-14);
  CHECK_FALSE(fell_back);
  const LightField rect(random_tensor({1, 1, 6, 5, 4}, 8), 2, 3);
  CHECK(max_abs_diff(tta_infer(bicubic_model(2), rect, &fell_back), bicubic_model(2)(rect.tensor())) < 1e-14);
  CHECK(fell_back);
}

TEST_CASE("TTA averages a non-equivariant model over the group") {
  const LightField lf(random_tensor({1, 1, 4, 3, 3}, 9), 2, 2);
  LumaModel shift = [](const Tensor& x) {
    std::vector<double> v = x.to_vector();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.01 * static_cast<double>(i % 3);
    return Tensor::from_vector(x.shape(), v, x.dtype());
  };
  const Tensor out = tta_infer(shift, lf);
  Tensor expect;
  for (const auto& g : Dihedral::all()) {
    const LightField in = apply_dihedral(lf, g);
    const Tensor back = apply_dihedral(in.with(shift(in.tensor())), g.inverse()).tensor();
    expect = expect.defined() ? ops::add(expect, back) : back;
  }
  CHECK(max_abs_diff(out, ops::scale(expect, 0.125)) < 1e-15);
  const LightField flat(Tensor::full({1, 1, 4, 3, 3}, 0.4, DType::F64), 2, 2);
  for (double v : tta_infer(bicubic_model(2), flat).to_vector()) CHECK(v == doctest::Approx(0.4).epsilon(1e-14));
}

TEST_CASE("super-resolve routes only luminance through the model") {
  const Tensor rgb = random_tensor({1, 3, 4, 5, 5}, 10);
  const Tensor out = super_resolve(bicubic_model(2), rgb, 2);
  const Tensor expect = ops::clamp(bicubic_model(2)(rgb), 0.0, 1.0);
  CHECK(max_abs_diff(out, expect) < 1e-13);
  const Tensor grey = super_resolve([](const Tensor& x) { return ops::scale(bicubic_model(2)(x), 5.0); },
                                    random_tensor({1, 1, 4, 5, 5}, 11), 2);
  for (double v : grey.to_vector()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(super_resolve(bicubic_model(2), random_tensor({1, 2, 4, 5, 5}, 12), 2), ShapeError);
}

TEST_CASE("PSNR and SSIM closed forms") {
  std::vector<double> a(64, 0.5), b(64, 0.6);
  CHECK(psnr(a.data(), b.data(), 64) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(std::isinf(psnr(a.data(), a.data(), 64)));
  CHECK(ssim(a.data(), a.data(), 8, 8) == doctest::Approx(1.0).epsilon(1e-12));
  const double C1 = 1e-4;
  CHECK(ssim(a.data(), b.data(), 8, 8) == doctest::Approx((2 * 0.3 + C1) / (0.25 + 0.36 + C1)).epsilon(1e-12));
  const Tensor x = random_tensor({1, 1, 1, 16, 16}, 13);
  const auto xv = x.to_vector();
  std::vector<double> neg(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) neg[i] = 1.0 - xv[i];
  CHECK(ssim(xv.data(), xv.data(), 16, 16) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(xv.data(), neg.data(), 16, 16) < 0.0);
}

TEST_CASE("metric report averages views then scenes") {
  const Tensor gt = random_tensor({2, 1, 2, 12, 12}, 14);
  std::vector<double> p = gt.to_vector();
  for (std::size_t i = 0; i < 144; ++i) p[i] += 0.1;
  for (std::size_t i = 144; i < 288; ++i) p[i] += 0.01;
  const MetricReport r = evaluate_y(Tensor::from_vector(gt.shape(), p, DType::F64), gt);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[0].psnr == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(r.rows[1].psnr == doctest::Approx(40.0).epsilon(1e-9));
  CHECK(std::isinf(r.rows[2].psnr));
  CHECK(std::isinf(r.mean_psnr));
  const std::string text = r.to_text();
  CHECK(text.rfind("scene,view,psnr,ssim\n0,0,20.0000,", 0) == 0);
  CHECK(text.find("1,1,inf,1.0000\n") != std::string::npos);
  CHECK(text.find("mean,all,inf,") != std::string::npos);
  const MetricReport finite = evaluate_y(Tensor::from_vector(gt.shape(), p, DType::F64),
                                         ops::add_scalar(gt, 0.0).to(DType::F32).to(DType::F64));
  CHECK(std::isfinite(finite.mean_psnr));
  CHECK_THROWS_AS(evaluate_y(gt, random_tensor({2, 1, 2, 12, 11}, 15)), ShapeError);
}

TEST_CASE("synthetic light fields have the requested disparity") {
  for (int64_t d : {0, 1, 2}) {
    SceneRecipe r;
    r.u = r.v = 5;
    r.height = r.width = 32;
    r.channels = 1;
    r.disparities = {static_cast<double>(d)};
    const SyntheticPair p = gen_synthetic_lf(r, 2, 20 + static_cast<std::uint64_t>(d));
    CHECK(p.hr.shape() == Shape{1, 1, 25, 32, 32});
    CHECK(p.lr.shape() == Shape{1, 1, 25, 16, 16});
    const LightField lf(p.hr, 5, 5);
    for (const auto& [dir, s] : verify_epi_slope(lf)) {
      INFO(direction_name(dir));
      CHECK(s == d);
    }
    const auto rev = verify_epi_slope(reverse_angular(lf, true, false));
    CHECK(rev.at(EpiDirection::Horizontal) == -d);
    CHECK(rev.at(EpiDirection::Vertical) == d);
    const auto both = verify_epi_slope(reverse_angular(lf, true, true));
    CHECK(both.at(EpiDirection::Horizontal) == -d);
    CHECK(both.at(EpiDirection::Vertical) == -d);
  }
  const Tensor a = gen_synthetic_lf(SceneRecipe{}, 4, 5).hr, b = gen_synthetic_lf(SceneRecipe{}, 4, 5).hr;
  CHECK(a.to_vector() == b.to_vector());
  CHECK_THROWS_AS(verify_epi_slope(LightField(Tensor::full({1, 1, 9, 8, 8}, 0.5, DType::F64), 3, 3)), NumericError);
}

TEST_CASE("PNG and PGM round trips") {
  const fs::path dir = scratch("images");
  Image img{5, 4, 3, {}};
  std::mt19937_64 rng(16);
  for (int i = 0; i < 60; ++i) img.data.push_back(static_cast<double>(rng() % 65536) / 65535.0);
  write_png((dir / "a.png").string(), img, 16);
  const Image back = read_image((dir / "a.png").string());
  CHECK(back.height == 5);
  CHECK(back.width == 4);
  CHECK(back.channels == 3);
  CHECK(back.data == img.data);

  Image grey{3, 7, 1, {}};
  for (int i = 0; i < 21; ++i) grey.data.push_back(static_cast<double>(i * 12) / 255.0);
  write_pgm((dir / "g.pgm").string(), grey, 8);
  CHECK(read_image((dir / "g.pgm").string()).data == grey.data);
  write_png((dir / "g.png").string(), grey, 8);
  CHECK(read_png((dir / "g.png").string()).data == grey.data);
  CHECK_THROWS_AS(write_pgm((dir / "c.pgm").string(), img, 16), ContractError);
  CHECK_THROWS_AS(read_image((dir / "missing.png").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("light-field bundles round trip with metadata") {
  const fs::path dir = scratch("bundle");
  std::vector<double> v(1 * 3 * 6 * 4 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i % 97) / 65535.0;
  Bundle b{Tensor::from_vector({1, 3, 6, 4, 5}, v, DType::F64), 2, 3, {{"mode", "test"}}};
  write_bundle(dir.string(), b);
  const Bundle r = read_bundle(dir.string());
  CHECK(r.u == 2);
  CHECK(r.v == 3);
  CHECK(r.meta.at("mode") == "test");
  CHECK(r.tensor.shape() == b.tensor.shape());
  CHECK(max_abs_diff(r.tensor, b.tensor) < 1e-15);
  fs::remove(dir / "view_01_02.png");
  CHECK_THROWS_AS(read_bundle(dir.string()), IoError);
  fs::remove_all(dir);
}
