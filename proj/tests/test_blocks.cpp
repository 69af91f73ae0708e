// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "omni_epi/blocks.hpp"
#include "omni_epi/gradcheck.hpp"
#include "omni_epi/ops.hpp"

using namespace omni;
using std::int64_t;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
  for (auto& x : v) x = uni(rng);
  return Tensor::from_vector(s, v, DType::F64);
}

void fill(Tensor& t, double v) {
  for (auto& x : t.mutable_data<double>()) x = v;
}

void randomize(Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-0.5, 0.5);
  for (auto& x : t.mutable_data<double>()) x = uni(rng);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  REQUIRE(x.size() == y.size());
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::fabs(x[i] - y[i]));
  return m;
}

/// Explicit per-head softmax(q k^T / sqrt(d)) v followed by the output projection.
std::vector<double> dense_attention(const MultiHeadAttention& a, const Tensor& tokens,
                                    const std::vector<std::uint8_t>* mask) {
  const int64_t S = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2), h = a.heads, d = C / h;
  const auto x = tokens.to_vector(), wq = a.qkv.weight.to_vector(), bq = a.qkv.bias.to_vector();
  const auto wp = a.proj.weight.to_vector(), bp = a.proj.bias.to_vector();
  std::vector<double> out(static_cast<std::size_t>(S * L * C));
  for (int64_t s = 0; s < S; ++s) {
    std::vector<double> qkv(static_cast<std::size_t>(L * 3 * C));
    for (int64_t l = 0; l < L; ++l)
      for (int64_t o = 0; o < 3 * C; ++o) {
        double acc = bq[o];
        for (int64_t c = 0; c < C; ++c) acc += wq[o * C + c] * x[(s * L + l) * C + c];
        qkv[l * 3 * C + o] = acc;
      }
    std::vector<double> ctx(static_cast<std::size_t>(L * C), 0.0);
    for (int64_t hd = 0; hd < h; ++hd)
      for (int64_t i = 0; i < L; ++i) {
        std::vector<double> sc(static_cast<std::size_t>(L));
        double mx = -1e300;
        for (int64_t j = 0; j < L; ++j) {
          double dot = 0.0;
          for (int64_t e = 0; e < d; ++e) dot += qkv[i * 3 * C + hd * d + e] * qkv[j * 3 * C + C + hd * d + e];
          sc[j] = dot / std::sqrt(static_cast<double>(d));
          if (!mask || (*mask)[i * L + j]) mx = std::max(mx, sc[j]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < L; ++j) {
          sc[j] = (!mask || (*mask)[i * L + j]) ? std::exp(sc[j] - mx) : 0.0;
          z += sc[j];
        }
        for (int64_t j = 0; j < L; ++j)
          for (int64_t e = 0; e < d; ++e) ctx[i * C + hd * d + e] += sc[j] / z * qkv[j * 3 * C + 2 * C + hd * d + e];
      }
    for (int64_t l = 0; l < L; ++l)
      for (int64_t o = 0; o < C; ++o) {
        double acc = bp[o];
        for (int64_t c = 0; c < C; ++c) acc += wp[o * C + c] * ctx[l * C + c];
        out[(s * L + l) * C + o] = acc;
      }
  }
  return out;
}

BlockConfig small_block(bool tiny, bool share) {
  BlockConfig c;
  c.branch.channels = 8;
  c.branch.heads = 2;
  c.fusion.channels = 8;
  c.fusion.tiny_mode = tiny;
  c.fusion.reduction = 4;
  c.share_hv = share;
  return c;
}

}  // namespace

TEST_CASE("band mask") {
  const auto m = band_mask(2, 4, 1);
  REQUIRE(m.size() == 64);
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 8; ++j) CHECK(m[i * 8 + j] == (std::abs(i % 4 - j % 4) <= 1 ? 1 : 0));
}

TEST_CASE("attention matches the dense oracle") {
  Initializer init(1, DType::F64);
  const auto a = MultiHeadAttention::make(8, 2, init);
  const Tensor x = random_tensor({1, 6, 8}, 2);
  const auto expect = dense_attention(a, x, nullptr);
  const auto got = a.forward(x).to_vector();
  double err = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) err = std::max(err, std::fabs(got[i] - expect[i]));
  CHECK(err < 1e-12);
}

TEST_CASE("band-masked attention matches the oracle and zeroes distant weights") {
  Initializer init(3, DType::F64);
  const auto a = MultiHeadAttention::make(8, 2, init);
  const Tensor x = random_tensor({3, 8, 8}, 4);
  const auto mask = band_mask(2, 4, 1);
  Tensor w;
  const auto got = a.forward(x, &mask, &w).to_vector();
  const auto expect = dense_attention(a, x, &mask);
  double err = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) err = std::max(err, std::fabs(got[i] - expect[i]));
  CHECK(err < 1e-12);
  REQUIRE(w.shape() == Shape{3, 2, 8, 8});
  const auto wv = w.to_vector();
  for (int64_t s = 0; s < 6; ++s)
    for (int64_t i = 0; i < 8; ++i)
      for (int64_t j = 0; j < 8; ++j)
        if (std::abs(i % 4 - j % 4) > 1) CHECK(wv[(s * 8 + i) * 8 + j] == 0.0);
}

TEST_CASE("attention over one token passes the value projection through") {
  Initializer init(5, DType::F64);
  const auto a = MultiHeadAttention::make(4, 2, init);
  const Tensor x = random_tensor({2, 1, 4}, 6);
  const Tensor v = ops::slice(a.qkv(x), 2, 8, 4);
  CHECK(max_abs_diff(a.forward(x), a.proj(v)) < 1e-14);
}

TEST_CASE("identical tokens attend uniformly") {
  Initializer init(7, DType::F64);
  const auto a = MultiHeadAttention::make(8, 4, init);
  const Tensor row = random_tensor({1, 1, 8}, 8);
  const Tensor parts[] = {row, row, row, row, row};
  Tensor w;
  a.forward(ops::concat(parts, 1), nullptr, &w);
  for (double p : w.to_vector()) CHECK(p == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("unmasked attention is permutation equivariant") {
  Initializer init(9, DType::F64);
  const auto a = MultiHeadAttention::make(8, 2, init);
  const Tensor x = random_tensor({2, 5, 8}, 10);
  const std::vector<int64_t> perm{3, 0, 4, 1, 2};
  const Tensor lhs = a.forward(ops::gather(x, 1, perm));
  const Tensor rhs = ops::gather(a.forward(x), 1, perm);
  CHECK(max_abs_diff(lhs, rhs) < 1e-13);
}

TEST_CASE("attention rejects a fully masked row and bad head counts") {
  Initializer init(11, DType::F64);
  const auto a = MultiHeadAttention::make(8, 2, init);
  std::vector<std::uint8_t> mask(16, 1);
  for (int j = 0; j < 4; ++j) mask[2 * 4 + j] = 0;
  CHECK_THROWS_AS(a.forward(random_tensor({1, 4, 8}, 12), &mask), ContractError);
  BranchConfig bc;
  bc.channels = 10;
  bc.heads = 4;
  CHECK_THROWS_AS(bc.validate(), ConfigError);
}

TEST_CASE("zero LayerScale makes the branch the identity") {
  BranchConfig bc;
  bc.channels = 8;
  bc.heads = 2;
  bc.layerscale_init = 0.0;
  Initializer init(13, DType::F64);
  const auto br = EpiBranch::make(bc, init);
  const Tensor x = random_tensor({4, 6, 8}, 14);
  CHECK(br.forward(x, 2, 3).to_vector() == x.to_vector());
}

TEST_CASE("without drop path training and evaluation agree bit for bit") {
  BranchConfig bc;
  bc.channels = 8;
  bc.heads = 2;
  bc.layerscale_init = 0.7;
  Initializer init(15, DType::F64);
  const auto br = EpiBranch::make(bc, init);
  const Tensor x = random_tensor({4, 6, 8}, 16);
  std::mt19937_64 rng(1);
  CHECK(br.forward(x, 2, 3, true, &rng).to_vector() == br.forward(x, 2, 3).to_vector());
}

TEST_CASE("drop path removes residual branches per sequence") {
  BranchConfig bc;
  bc.channels = 8;
  bc.heads = 2;
  bc.layerscale_init = 0.7;
  bc.droppath_rate = 0.5;
  Initializer init(17, DType::F64);
  const auto br = EpiBranch::make(bc, init);
  const Tensor x = random_tensor({64, 6, 8}, 18);
  std::mt19937_64 rng(2);
  const auto train = br.forward(x, 2, 3, true, &rng).to_vector();
  const auto xv = x.to_vector();
  int untouched = 0;
  for (int64_t s = 0; s < 64; ++s) {
    bool same = true;
    for (int64_t i = 0; i < 48; ++i) same = same && train[s * 48 + i] == xv[s * 48 + i];
    untouched += same ? 1 : 0;
  }
  CHECK(untouched > 4);
  CHECK(untouched < 40);
  bc.droppath_rate = 0.0;
  Initializer init2(17, DType::F64);
  const auto plain = EpiBranch::make(bc, init2);
  CHECK(br.forward(x, 2, 3).to_vector() == plain.forward(x, 2, 3).to_vector());
}

TEST_CASE("branch gradients match finite differences") {
  BranchConfig bc;
  bc.channels = 8;
  bc.heads = 2;
  bc.local_window = 1;
  Initializer init(19, DType::F64);
  auto br = EpiBranch::make(bc, init);
  fill(br.gamma1, 0.6);
  fill(br.gamma2, 0.4);
  Tensor x = random_tensor({4, 6, 8}, 20);
  std::vector<Tensor> wrt{x, br.gamma1, br.norm1.gamma, br.attention.proj.weight, br.ffn.expand.bias};
  CHECK(grad_check([&] { return projection_loss(br.forward(x, 2, 3), 1); }, wrt) < 1e-4);
}

TEST_CASE("feed-forward with zero projection outputs zero") {
  Initializer init(21, DType::F64);
  auto f = FeedForward::make(8, 2, true, init);
  fill(f.project.weight, 0.0);
  for (double v : f.forward(random_tensor({2, 20, 8}, 22), 5, 4).to_vector()) CHECK(v == 0.0);
}

TEST_CASE("feed-forward with identity pieces reduces to GELU of the norm") {
  const int64_t C = 4;
  Initializer init(23, DType::F64);
  auto f = FeedForward::make(C, 2, true, init);
  std::vector<double> we(2 * C * C, 0.0), wp(2 * C * C, 0.0), dw(2 * C * 9, 0.0);
  for (int64_t i = 0; i < C; ++i) {
    we[i * C + i] = 1.0;
    wp[i * 2 * C + i] = 1.0;
  }
  for (int64_t k = 0; k < 2 * C; ++k) dw[k * 9 + 4] = 1.0;
  f.expand.weight.mutable_data<double>().data()[0] = 0.0;
  std::copy(we.begin(), we.end(), f.expand.weight.mutable_data<double>().begin());
  std::copy(wp.begin(), wp.end(), f.project.weight.mutable_data<double>().begin());
  std::copy(dw.begin(), dw.end(), f.depthwise.weight.mutable_data<double>().begin());
  fill(f.expand.bias, 0.0);
  fill(f.project.bias, 0.0);
  fill(f.depthwise.bias, 0.0);
  randomize(f.norm.gamma, 24);
  randomize(f.norm.beta, 25);
  const Tensor x = random_tensor({3, 6, C}, 26);
  const Tensor expect = ops::gelu(ops::layer_norm(x, f.norm.gamma, f.norm.beta));
  CHECK(max_abs_diff(f.forward(x, 2, 3), expect) < 1e-14);
}

TEST_CASE("feed-forward rejects a token count off its grid") {
  Initializer init(27, DType::F64);
  const auto f = FeedForward::make(8, 2, true, init);
  CHECK_THROWS_AS(f.forward(random_tensor({1, 20, 8}, 28), 3, 6), ContractError);
}

TEST_CASE("feed-forward gradients") {
  Initializer init(29, DType::F64);
  auto f = FeedForward::make(8, 2, true, init);
  Tensor x = random_tensor({2, 20, 8}, 30);
  std::vector<Tensor> wrt{x, f.depthwise.weight, f.depthwise.bias, f.expand.weight, f.norm.beta};
  CHECK(grad_check([&] { return projection_loss(f.forward(x, 5, 4), 2); }, wrt) < 1e-5);
  auto flat = FeedForward::make(8, 2, false, init);
  std::vector<Tensor> wrt2{x, flat.expand.weight};
  CHECK(grad_check([&] { return projection_loss(flat.forward(x, 5, 4), 3); }, wrt2) < 1e-5);
}

TEST_CASE("fusion descriptor is the mean of the branch sum") {
  const Tensor ones = Tensor::full({1, 4, 2, 3, 3}, 1.0, DType::F64);
  const Tensor z = DirectionalFusion::descriptor({ones, ones, ones});
  CHECK(z.shape() == Shape{1, 4});
  for (double v : z.to_vector()) CHECK(v == doctest::Approx(3.0).epsilon(1e-15));
  const Tensor r = random_tensor({2, 4, 2, 3, 3}, 31);
  const auto zr = DirectionalFusion::descriptor({r, ops::scale(r, 2.0), r}).to_vector();
  const auto rv = r.to_vector();
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 4; ++c) {
      double s = 0.0;
      for (int64_t i = 0; i < 18; ++i) s += 4.0 * rv[(b * 4 + c) * 18 + i];
      CHECK(zr[b * 4 + c] == doctest::Approx(s / 18.0).epsilon(1e-13));
    }
}

TEST_CASE("fusion of zero branches returns the input") {
  for (bool tiny : {true, false}) {
    FusionConfig fc;
    fc.channels = 8;
    fc.tiny_mode = tiny;
    Initializer init(32, DType::F64);
    auto fu = DirectionalFusion::make(fc, 3, true, init);
    fill(fu.conv.bias, 0.0);
    const Tensor zero = Tensor::zeros({1, 8, 4, 3, 3}, DType::F64);
    const Tensor in = random_tensor({1, 8, 4, 3, 3}, 33);
    Tensor gates;
    CHECK(fu.forward({zero, zero, zero}, in, &gates).to_vector() == in.to_vector());
    CHECK(gates.shape() == Shape{1, 24});
    if (tiny) {
      const Tensor expect = ops::sigmoid(fu.expand(ops::gelu(fu.reduce(Tensor::zeros({1, 8}, DType::F64)))));
      CHECK(max_abs_diff(gates, expect) < 1e-15);
    }
  }
}

TEST_CASE("tiny gates lie strictly inside (0, 1)") {
  FusionConfig fc;
  fc.channels = 8;
  fc.tiny_mode = true;
  Initializer init(34, DType::F64);
  const auto fu = DirectionalFusion::make(fc, 3, true, init);
  for (double scale : {1.0, 4.0, 10.0}) {
    const Tensor z = ops::scale(random_tensor({3, 8}, 35), scale);
    for (double g : fu.gates(z).to_vector()) {
      CHECK(g > 0.0);
      CHECK(g < 1.0);
    }
  }
}

TEST_CASE("fusion with zero convolution is residual under input scaling") {
  FusionConfig fc;
  fc.channels = 8;
  Initializer init(36, DType::F64);
  auto fu = DirectionalFusion::make(fc, 3, true, init);
  fill(fu.conv.weight, 0.0);
  fill(fu.conv.bias, 0.0);
  const Tensor in = random_tensor({1, 8, 4, 3, 3}, 37);
  std::vector<Tensor> br{random_tensor({1, 8, 4, 3, 3}, 38), random_tensor({1, 8, 4, 3, 3}, 39),
                         random_tensor({1, 8, 4, 3, 3}, 40)};
  const auto z1 = DirectionalFusion::descriptor(br).to_vector();
  for (auto& b : br) b = ops::scale(b, 2.5);
  const auto z2 = DirectionalFusion::descriptor(br).to_vector();
  for (std::size_t i = 0; i < z1.size(); ++i) CHECK(z2[i] == doctest::Approx(2.5 * z1[i]).epsilon(1e-13));
  CHECK(fu.forward(br, in).to_vector() == in.to_vector());
  CHECK_THROWS_AS(fu.forward({br[0], br[1], random_tensor({1, 8, 4, 3, 2}, 41)}, in), ShapeError);
}

TEST_CASE("fusion configuration rules") {
  FusionConfig fc;
  fc.channels = 10;
  fc.reduction = 4;
  CHECK_THROWS_AS(fc.validate(), ConfigError);
  fc.tiny_mode = true;
  CHECK_NOTHROW(fc.validate());
  CHECK(fc.hidden() == 5);
  fc.channels = 9;
  CHECK_THROWS_AS(fc.validate(), ConfigError);
}

TEST_CASE("block with zero LayerScale and zero fusion conv is the identity") {
  for (bool tiny : {true, false}) {
    BlockConfig bc = small_block(tiny, !tiny);
    bc.branch.layerscale_init = 0.0;
    Initializer init(42, DType::F64);
    auto blk = OmniEpiBlock::make(bc, init);
    fill(blk.fusion.conv.weight, 0.0);
    fill(blk.fusion.conv.bias, 0.0);
    const LightField in(random_tensor({1, 8, 9, 4, 4}, 43), 3, 3);
    CHECK(blk.forward(in).tensor().to_vector() == in.tensor().to_vector());
  }
}

TEST_CASE("block parameter sharing and names") {
  Initializer a(44, DType::F64), b(44, DType::F64);
  const auto shared = OmniEpiBlock::make(small_block(false, true), a);
  const auto split = OmniEpiBlock::make(small_block(true, false), b);
  CHECK(shared.horizontal == shared.vertical);
  CHECK(split.horizontal != split.vertical);
  ParameterSet ps, pt;
  shared.collect("block", ps);
  split.collect("block", pt);
  CHECK(ps.find("block.branch_hv.attn.qkv.weight") != nullptr);
  CHECK(pt.find("block.branch_h.attn.qkv.weight") != nullptr);
  CHECK(pt.find("block.branch_v.attn.qkv.weight") != nullptr);
  CHECK(pt.find("block.branch_d.gamma1") != nullptr);
  for (const auto* set : {&ps, &pt}) {
    std::set<std::string> names;
    for (const auto& p : set->items()) names.insert(p.name);
    CHECK(names.size() == set->size());
  }
  CHECK(pt.total_elements() > ps.total_elements());
}

TEST_CASE("diagonal branch receives gradient and its scatter is zero off the diagonals") {
  Initializer init(45, DType::F64);
  auto blk = OmniEpiBlock::make(small_block(true, false), init);
  Tensor x = random_tensor({1, 8, 9, 4, 4}, 46);
  BlockTrace trace;
  const Tensor out = blk.forward(LightField(x, 3, 3), false, nullptr, &trace).tensor();
  const auto sc = trace.diagonal_scatter.to_vector();
  const std::set<int64_t> diag{0, 2, 4, 6, 8};
  for (int64_t c = 0; c < 8; ++c)
    for (int64_t a = 0; a < 9; ++a)
      if (!diag.count(a))
        for (int64_t i = 0; i < 16; ++i) CHECK(sc[(c * 9 + a) * 16 + i] == 0.0);

  ParameterSet ps;
  blk.collect("b", ps);
  std::vector<Tensor> params = ps.tensors();
  for (auto& p : params) p.set_requires_grad(true);
  backward(projection_loss(blk.forward(LightField(x, 3, 3)).tensor(), 3), params);
  for (const auto& p : ps.items()) {
    if (p.name.rfind("b.branch_d.", 0) != 0 || p.name.find("norm") != std::string::npos) continue;
    double n = 0.0;
    for (double g : p.tensor.grad().to_vector()) n += g * g;
    INFO(p.name);
    CHECK(n > 0.0);
  }
}

TEST_CASE("block gradients match finite differences") {
  Initializer init(47, DType::F64);
  auto blk = OmniEpiBlock::make(small_block(true, false), init);
  fill(blk.horizontal->gamma1, 0.5);
  fill(blk.diagonal->gamma2, 0.5);
  Tensor x = random_tensor({1, 8, 9, 4, 4}, 48);
  std::vector<Tensor> wrt{x, blk.refine.weight, blk.fusion.reduce.weight, blk.diagonal->attention.qkv.weight};
  GradCheckOptions opt;
  opt.max_coords = 12;
  CHECK(grad_check([&] { return projection_loss(blk.forward(LightField(x, 3, 3)).tensor(), 4); }, wrt, opt) <
        1e-4);
}

TEST_CASE("angular embedding") {
  const Tensor f = random_tensor({2, 3, 4, 2, 5}, 49);
  CHECK(angular_pos_embed(f, Tensor::zeros({1, 3, 4, 1, 1}, DType::F64)).to_vector() == f.to_vector());
  const Tensor p = random_tensor({1, 3, 4, 1, 1}, 50);
  const Tensor out = angular_pos_embed(Tensor::zeros({2, 3, 4, 2, 5}, DType::F64), p);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t a = 0; a < 4; ++a)
        for (int64_t h = 0; h < 2; ++h)
          for (int64_t w = 0; w < 5; ++w) CHECK(out.at({b, c, a, h, w}) == p.at({0, c, a, 0, 0}));
  Tensor pg = p.clone();
  pg.set_requires_grad(true);
  backward(ops::sum(angular_pos_embed(f, pg)));
  for (double g : pg.grad().to_vector()) CHECK(g == 2.0 * 2.0 * 5.0);
  CHECK_THROWS_AS(angular_pos_embed(f, Tensor::zeros({1, 3, 5, 1, 1}, DType::F64)), ShapeError);
}

TEST_CASE("multi-level aggregation") {
  const int64_t C = 4;
  Initializer init(51, DType::F64);
  auto mla = MultiLevelAggregation::make(C, 3, init);
  const std::vector<Tensor> f{random_tensor({1, C, 3, 2, 2}, 52), random_tensor({1, C, 3, 2, 2}, 53),
                              random_tensor({1, C, 3, 2, 2}, 54)};
  auto set_weights = [&](double a, double b, double c) {
    auto w = mla.conv.weight.mutable_data<double>();
    std::fill(w.begin(), w.end(), 0.0);
    for (int64_t o = 0; o < C; ++o) {
      w[o * 3 * C + o] = a;
      w[o * 3 * C + C + o] = b;
      w[o * 3 * C + 2 * C + o] = c;
    }
    fill(mla.conv.bias, 0.0);
  };
  set_weights(1, 0, 0);
  CHECK(mla.forward(f).to_vector() == f[0].to_vector());
  set_weights(1.0 / 3, 1.0 / 3, 1.0 / 3);
  const Tensor mean = ops::scale(ops::add(ops::add(f[0], f[1]), f[2]), 1.0 / 3);
  CHECK(max_abs_diff(mla.forward(f), mean) < 1e-15);

  Initializer big(55, DType::F32);
  const auto m32 = MultiLevelAggregation::make(32, 3, big);
  const Tensor x = Tensor::zeros({1, 32, 25, 8, 8}, DType::F32);
  CHECK(m32.forward({x, x, x}).shape() == Shape{1, 32, 25, 8, 8});
  CHECK_THROWS_AS(m32.forward({x, x}), ContractError);
}
