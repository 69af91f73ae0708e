// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "omni_epi/geometry.hpp"
#include "omni_epi/gradcheck.hpp"
#include "omni_epi/ops.hpp"

using namespace omni;
using std::int64_t;

namespace {

/// Light field whose every element holds its own flat index.
LightField indexed(int64_t b, int64_t c, int64_t u, int64_t v, int64_t h, int64_t w) {
  std::vector<double> x(static_cast<std::size_t>(b * c * u * v * h * w));
  std::iota(x.begin(), x.end(), 0.0);
  return LightField(Tensor::from_vector({b, c, u * v, h, w}, x, DType::F64), u, v);
}

LightField random_lf(int64_t b, int64_t c, int64_t u, int64_t v, int64_t h, int64_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1, 1);
  std::vector<double> x(static_cast<std::size_t>(b * c * u * v * h * w));
  for (auto& e : x) e = uni(rng);
  return LightField(Tensor::from_vector({b, c, u * v, h, w}, x, DType::F64), u, v);
}

int64_t src(int64_t b, int64_t c, int64_t a, int64_t h, int64_t w, int64_t C, int64_t A, int64_t H, int64_t W) {
  return (((b * C + c) * A + a) * H + h) * W + w;
}

}  // namespace

TEST_CASE("horizontal EPI shape") {
  const auto e = to_horizontal_epi(indexed(1, 2, 5, 5, 4, 4));
  CHECK(e.tensor.shape() == Shape{1, 2, 20, 5, 4});
  CHECK(e.token_grid() == std::pair<int64_t, int64_t>{5, 4});
}

TEST_CASE("vertical EPI shape") {
  const auto e = to_vertical_epi(indexed(1, 2, 5, 5, 4, 4));
  CHECK(e.tensor.shape() == Shape{1, 2, 20, 5, 4});
}

TEST_CASE("single view horizontal EPI is a spatial transpose") {
  const LightField lf = indexed(2, 1, 1, 1, 3, 4);
  const auto e = to_horizontal_epi(lf);
  CHECK(e.tensor.shape() == Shape{2, 1, 4, 1, 3});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t h = 0; h < 3; ++h)
      for (int64_t w = 0; w < 4; ++w) CHECK(e.tensor.at({b, 0, w, 0, h}) == lf.tensor().at({b, 0, 0, h, w}));
  CHECK(to_vertical_epi(lf).tensor.to_vector() == lf.tensor().to_vector());
}

TEST_CASE("horizontal and vertical index tables match the mapping formula") {
  const int64_t B = 1, C = 2, U = 2, V = 2, H = 2, W = 2, A = U * V;
  const LightField lf = indexed(B, C, U, V, H, W);
  const auto hz = to_horizontal_epi(lf).tensor;
  const auto vt = to_vertical_epi(lf).tensor;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t u = 0; u < U; ++u)
      for (int64_t v = 0; v < V; ++v)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w) {
            const double s = static_cast<double>(src(0, c, u * V + v, h, w, C, A, H, W));
            CHECK(hz.at({0, c, v * W + w, u, h}) == s);
            CHECK(vt.at({0, c, u * H + h, v, w}) == s);
          }
}

TEST_CASE("inverse maps agree with the layout") {
  const LightField lf = random_lf(1, 2, 3, 2, 3, 2, 1);
  for (const auto& view : {to_horizontal_epi(lf), to_vertical_epi(lf), to_macpi(lf)}) {
    const auto map = view.inverse_map();
    const auto data = view.tensor.to_vector();
    const auto orig = lf.tensor().to_vector();
    std::set<int64_t> seen(map.begin(), map.end());
    CHECK(seen.size() == orig.size());
    for (std::size_t i = 0; i < map.size(); ++i) CHECK(data[i] == orig[map[i]]);
  }
}

TEST_CASE("vertical EPI of the transposed field equals the horizontal EPI") {
  const LightField lf = random_lf(1, 2, 3, 3, 4, 4, 2);
  const LightField t = apply_dihedral(lf, Dihedral{true, false, false});
  CHECK(to_vertical_epi(t).tensor.to_vector() == to_horizontal_epi(lf).tensor.to_vector());
}

TEST_CASE("rearrangements round-trip over random shapes") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int64_t> ang(1, 5), sp(1, 8), small(1, 2);
  for (int trial = 0; trial < 60; ++trial) {
    const LightField lf = random_lf(small(rng), small(rng), ang(rng), ang(rng), sp(rng), sp(rng), 100 + trial);
    const auto x = lf.tensor().to_vector();
    CHECK(from_epi(to_horizontal_epi(lf)).tensor().to_vector() == x);
    CHECK(from_epi(to_vertical_epi(lf)).tensor().to_vector() == x);
    CHECK(from_macpi(to_macpi(lf)).tensor().to_vector() == x);
    CHECK(from_epi(to_macpi(lf)).tensor().to_vector() == x);
  }
}

TEST_CASE("from_epi rejects diagonal views") {
  const auto [d45, d135] = extract_diagonals(random_lf(1, 1, 3, 3, 2, 2, 3));
  CHECK_THROWS_AS(from_epi(d45), ContractError);
  CHECK_THROWS_AS(from_epi(d135), ContractError);
}

TEST_CASE("round-trip gradient is the identity") {
  Tensor x = random_lf(1, 2, 3, 3, 2, 3, 4).tensor();
  std::vector<Tensor> wrt{x};
  const double err = grad_check(
      [&] {
        const LightField lf(x, 3, 3);
        const LightField h = from_epi(to_horizontal_epi(lf));
        const LightField v = from_epi(to_vertical_epi(h));
        return projection_loss(from_macpi(to_macpi(v)).tensor(), 5);
      },
      wrt);
  CHECK(err < 1e-9);
  CHECK(grad_check([&] {
          const auto [a, b] = extract_diagonals(LightField(x, 3, 3));
          return projection_loss(scatter_diagonals(a.tensor, b.tensor, LightField(x, 3, 3)).tensor(), 6);
        },
        wrt) < 1e-9);
}

TEST_CASE("diagonal index sets") {
  using V = std::vector<int64_t>;
  CHECK(diagonal_indices(3, 3, EpiDirection::Diag45) == V{0, 4, 8});
  CHECK(diagonal_indices(3, 3, EpiDirection::Diag135) == V{2, 4, 6});
  CHECK(diagonal_indices(1, 1, EpiDirection::Diag45) == V{0});
  CHECK(diagonal_indices(1, 1, EpiDirection::Diag135) == V{0});
  CHECK(diagonal_indices(5, 5, EpiDirection::Diag45) == V{0, 6, 12, 18, 24});
  CHECK(diagonal_indices(5, 5, EpiDirection::Diag135) == V{4, 8, 12, 16, 20});
  CHECK(diagonal_indices(2, 2, EpiDirection::Diag45) == V{0, 3});
  CHECK(diagonal_indices(2, 2, EpiDirection::Diag135) == V{1, 2});
  CHECK_THROWS_AS(diagonal_indices(3, 2, EpiDirection::Diag45), ContractError);
}

TEST_CASE("diagonal extraction and scatter against a brute-force oracle") {
  for (int64_t U : {1, 2, 3, 5}) {
    const int64_t B = 2, C = 2, H = 3, W = 4, A = U * U;
    const LightField lf = random_lf(B, C, U, U, H, W, 10 + U);
    const auto x = lf.tensor().to_vector();
    const auto [d45, d135] = extract_diagonals(lf);
    REQUIRE(d45.tensor.shape() == Shape{B, C, W, U, H});
    REQUIRE(d135.tensor.shape() == Shape{B, C, W, U, H});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t i = 0; i < U; ++i)
            for (int64_t h = 0; h < H; ++h) {
              CHECK(d45.tensor.at({b, c, w, i, h}) == x[src(b, c, i * U + i, h, w, C, A, H, W)]);
              CHECK(d135.tensor.at({b, c, w, i, h}) == x[src(b, c, i * U + (U - 1 - i), h, w, C, A, H, W)]);
            }

    const auto s = scatter_diagonals(d45.tensor, d135.tensor, lf).tensor().to_vector();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t u = 0; u < U; ++u)
          for (int64_t v = 0; v < U; ++v)
            for (int64_t h = 0; h < H; ++h)
              for (int64_t w = 0; w < W; ++w) {
                const int64_t k = src(b, c, u * U + v, h, w, C, A, H, W);
                const int hits = (u == v ? 1 : 0) + (v == U - 1 - u ? 1 : 0);
                CHECK(s[k] == hits * x[k]);
              }
  }
}

TEST_CASE("scatter of zeros is zero and layouts are validated") {
  const LightField like = random_lf(1, 2, 3, 3, 2, 2, 20);
  const Tensor z = Tensor::zeros({1, 2, 2, 3, 2}, DType::F64);
  for (double v : scatter_diagonals(z, z, like).tensor().to_vector()) CHECK(v == 0.0);
  CHECK_THROWS_AS(scatter_diagonals(Tensor::zeros({1, 2, 2, 2, 3}, DType::F64), z, like), ShapeError);
  CHECK_THROWS_AS(extract_diagonals(random_lf(1, 1, 2, 3, 2, 2, 21)), ContractError);
}

TEST_CASE("MacPI interleaving") {
  const LightField tiny = indexed(1, 1, 2, 2, 1, 1);
  const auto m = to_macpi(tiny);
  CHECK(m.tensor.shape() == Shape{1, 1, 2, 2});
  CHECK(m.tensor.to_vector() == std::vector<double>{0, 1, 2, 3});

  const int64_t U = 2, V = 3, H = 3, W = 2;
  const LightField lf = indexed(1, 1, U, V, H, W);
  const auto mp = to_macpi(lf).tensor;
  REQUIRE(mp.shape() == Shape{1, 1, U * H, V * W});
  for (int64_t u = 0; u < U; ++u)
    for (int64_t v = 0; v < V; ++v)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          CHECK(mp.at({0, 0, h * U + u, w * V + v}) == lf.tensor().at({0, 0, u * V + v, h, w}));
  CHECK(to_macpi(indexed(1, 1, 5, 5, 32, 32)).tensor.shape() == Shape{1, 1, 160, 160});
  CHECK_THROWS_AS(from_macpi(EpiView{Tensor::zeros({1, 1, 7, 6}, DType::F64), EpiDirection::MacPI, 2, 2, 3, 3}),
                  ShapeError);
}

TEST_CASE("dilation U on the MacPI touches the same view of neighbouring macro-pixels") {
  const int64_t U = 5, H = 6, W = 6;
  for (int64_t u : {0, 2, 4})
    for (int64_t v : {1, 3}) {
      const int64_t h = 2, w = 3;
      std::vector<double> x(static_cast<std::size_t>(U * U * H * W), 0.0);
      x[(u * U + v) * H * W + h * W + w] = 1.0;
      const LightField lf(Tensor::from_vector({1, 1, U * U, H, W}, x, DType::F64), U, U);
      auto mp = to_macpi(lf);
      Tensor k = Tensor::full({1, 1, 1, 3, 3}, 1.0, DType::F64);
      ops::ConvOptions opt;
      opt.dilation = {1, U, U};
      Tensor y = ops::conv3d(ops::reshape(mp.tensor, {1, 1, 1, U * H, U * W}), k, Tensor(), opt);
      mp.tensor = ops::reshape(y, {1, 1, U * H, U * W});
      const auto back = from_macpi(mp).tensor();
      for (int64_t a = 0; a < U * U; ++a)
        for (int64_t hh = 0; hh < H; ++hh)
          for (int64_t ww = 0; ww < W; ++ww) {
            const bool expect = a == u * U + v && std::abs(hh - h) <= 1 && std::abs(ww - w) <= 1;
            CHECK(back.at({0, 0, a, hh, ww}) == (expect ? 1.0 : 0.0));
          }
    }
}

TEST_CASE("token sequences round-trip") {
  const Tensor epi = random_lf(2, 3, 2, 2, 2, 5, 30).tensor();
  const Tensor tok = epi_to_tokens(epi);
  CHECK(tok.shape() == Shape{2 * 4, 10, 3});
  CHECK(tok.at({1 * 4 + 2, 1 * 5 + 3, 2}) == epi.at({1, 2, 2, 1, 3}));
  CHECK(tokens_to_epi(tok, 2, 3, 4, 2, 5).to_vector() == epi.to_vector());
  CHECK_THROWS_AS(tokens_to_epi(tok, 2, 3, 4, 5, 5), ShapeError);
}

TEST_CASE("dihedral group table") {
  const auto all = Dihedral::all();
  for (int i = 0; i < 8; ++i) CHECK(Dihedral::from_index(i).index() == i);
  for (const auto& a : all) {
    CHECK(Dihedral::compose(a, a.inverse()) == Dihedral{});
    CHECK(Dihedral::compose(a, Dihedral{}) == a);
    for (const auto& b : all)
      for (const auto& c : all)
        CHECK(Dihedral::compose(Dihedral::compose(a, b), c) == Dihedral::compose(a, Dihedral::compose(b, c)));
  }
  int involutions = 0;
  for (const auto& a : all) involutions += Dihedral::compose(a, a) == Dihedral{} ? 1 : 0;
  CHECK(involutions == 6);
}

TEST_CASE("dihedral action agrees with composition on data") {
  const LightField lf = random_lf(1, 2, 3, 3, 4, 4, 40);
  for (const auto& a : Dihedral::all()) {
    CHECK(apply_dihedral(apply_dihedral(lf, a), a.inverse()).tensor().to_vector() == lf.tensor().to_vector());
    for (const auto& b : Dihedral::all()) {
      const auto direct = apply_dihedral(lf, Dihedral::compose(a, b)).tensor().to_vector();
      CHECK(apply_dihedral(apply_dihedral(lf, b), a).tensor().to_vector() == direct);
    }
  }
}

TEST_CASE("dihedral action on coordinates") {
  const int64_t U = 3, H = 4;
  const LightField lf = indexed(1, 1, U, U, H, H);
  const auto at = [&](const LightField& f, int64_t u, int64_t v, int64_t h, int64_t w) {
    return f.tensor().at({0, 0, u * U + v, h, w});
  };
  const LightField fc = apply_dihedral(lf, Dihedral{false, false, true});
  const LightField fr = apply_dihedral(lf, Dihedral{false, true, false});
  const LightField tr = apply_dihedral(lf, Dihedral{true, false, false});
  CHECK(at(fc, 0, 0, 1, 0) == at(lf, 0, U - 1, 1, H - 1));
  CHECK(at(fr, 0, 1, 0, 2) == at(lf, U - 1, 1, H - 1, 2));
  CHECK(at(tr, 0, 2, 1, 3) == at(lf, 2, 0, 3, 1));
  CHECK_THROWS_AS(apply_dihedral(random_lf(1, 1, 2, 3, 2, 2, 41), Dihedral{true, false, false}), ContractError);
  CHECK_NOTHROW(apply_dihedral(random_lf(1, 1, 2, 3, 2, 2, 41), Dihedral{false, true, true}));
}
