// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/gradcheck.hpp"

#include "omni_epi/blocks.hpp"
#include "omni_epi/model.hpp"
#include "omni_epi/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace omni {

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> wrt, const GradCheckOptions& opt) {
  for (const auto& t : wrt) {
    if (t.dtype() != DType::F64) throw ContractError("grad_check needs 64-bit tensors");
    if (!t.is_leaf()) throw ContractError("grad_check differentiates with respect to leaves only");
  }
  auto evaluate = [&]() {
    NoGradGuard no_grad;
    return f().item();
  };
  const double base = evaluate();
  if (evaluate() != base) throw ContractError("grad_check: function is not deterministic");

  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  backward(f(), wrt);

  std::mt19937_64 rng(opt.seed);
  double worst = 0.0;
  for (auto& t : wrt) {
    const auto g = t.grad().to_vector();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(t.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.max_coords > 0 && static_cast<std::int64_t>(coords.size()) > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opt.max_coords));
    }
    auto x = t.mutable_data<double>();
    for (auto i : coords) {
      const double keep = x[i];
      x[i] = keep + opt.eps;
      const double up = evaluate();
      x[i] = keep - opt.eps;
      const double down = evaluate();
      x[i] = keep;
      const double central = (up - down) / (2.0 * opt.eps);
      worst = std::max(worst, std::fabs(g[i] - central) / std::max(1.0, std::fabs(central)));
    }
  }
  return worst;
}

Tensor projection_loss(const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<double> r(static_cast<std::size_t>(x.numel()));
  for (auto& v : r) v = uni(rng);
  return ops::sum(ops::mul(x, Tensor::from_vector(x.shape(), r, x.dtype())));
}

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = uni(rng);
  return Tensor::from_vector(shape, v, DType::F64);
}

void randomize(Tensor& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> uni(lo, hi);
  for (auto& x : t.mutable_data<double>()) x = uni(rng);
}

void randomize_gammas(EpiBranch& b, std::mt19937_64& rng) {
  randomize(b.gamma1, rng, 0.3, 0.7);
  randomize(b.gamma2, rng, 0.3, 0.7);
}

ModelConfig toy_model(bool macpi) {
  ModelConfig c = ModelConfig::preset("nano");
  c.blocks = 1;
  c.mla_taps = {1};
  c.layerscale_init = 0.5;
  c.macpi_prior = macpi;
  return c;
}

}  // namespace

std::vector<GradCheckCase> gradient_suite(std::uint64_t seed, std::int64_t max_coords) {
  std::vector<GradCheckCase> out;
  std::mt19937_64 rng(seed);
  Initializer init(seed, DType::F64);
  GradCheckOptions opt;
  opt.max_coords = max_coords;
  opt.seed = seed;
  const std::uint64_t probe = seed + 7;
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> wrt) {
    out.push_back({name, grad_check(f, wrt, opt)});
  };

  for (bool masked : {false, true}) {
    const auto attn = MultiHeadAttention::make(8, 2, init);
    const Tensor x = random_tensor({3, 6, 8}, rng);
    const auto mask = band_mask(2, 3, 1);
    run(masked ? "mhsa_band_mask" : "mhsa",
        [&] { return projection_loss(attn.forward(x, masked ? &mask : nullptr), probe); },
        {x, attn.qkv.weight, attn.qkv.bias, attn.proj.weight});
  }
  {
    const auto ffn = FeedForward::make(8, 2, true, init);
    const Tensor x = random_tensor({2, 20, 8}, rng);
    run("tp_ffn", [&] { return projection_loss(ffn.forward(x, 5, 4), probe); },
        {x, ffn.norm.gamma, ffn.expand.weight, ffn.depthwise.weight, ffn.project.weight});
  }
  {
    BranchConfig bc;
    bc.channels = 8;
    bc.heads = 2;
    auto branch = EpiBranch::make(bc, init);
    randomize_gammas(branch, rng);
    const Tensor x = random_tensor({4, 6, 8}, rng);
    run("epi_branch", [&] { return projection_loss(branch.forward(x, 2, 3), probe); },
        {x, branch.gamma1, branch.gamma2, branch.attention.qkv.weight, branch.ffn.depthwise.weight});
  }
  for (bool tiny : {true, false}) {
    FusionConfig fc;
    fc.channels = 8;
    fc.tiny_mode = tiny;
    fc.reduction = 4;
    const auto fusion = DirectionalFusion::make(fc, 3, true, init);
    std::vector<Tensor> br;
    for (int i = 0; i < 3; ++i) br.push_back(random_tensor({1, 8, 4, 3, 3}, rng));
    const Tensor in = random_tensor({1, 8, 4, 3, 3}, rng);
    run(tiny ? "fusion_tiny" : "fusion_fidelity", [&] { return projection_loss(fusion.forward(br, in), probe); },
        {br[0], br[2], in, fusion.reduce.weight, fusion.expand.weight, fusion.conv.weight});
  }
  {
    BlockConfig bc;
    bc.branch.channels = 8;
    bc.branch.heads = 2;
    bc.fusion.channels = 8;
    bc.fusion.tiny_mode = true;
    bc.share_hv = false;
    auto block = OmniEpiBlock::make(bc, init);
    randomize_gammas(*block.horizontal, rng);
    randomize_gammas(*block.vertical, rng);
    randomize_gammas(*block.diagonal, rng);
    const Tensor x = random_tensor({1, 8, 9, 4, 4}, rng);
    run("omni_epi_block",
        [&] { return projection_loss(block.forward(LightField(x, 3, 3)).tensor(), probe); },
        {x, block.horizontal->attention.qkv.weight, block.vertical->ffn.expand.weight,
         block.diagonal->ffn.project.weight, block.refine.weight, block.fusion.conv.weight,
         block.fusion.expand.weight});
  }
  {
    const auto model = GtfModel::make(toy_model(true), seed, DType::F64);
    const Tensor lr = random_tensor({1, 1, 9, 4, 4}, rng, 0.0, 1.0);
    run("macpi_prior", [&] { return projection_loss(model.initial_features(lr), probe); },
        {lr, model.prior_conv.weight, model.prior_fuse.weight, model.shallow.weight});
  }
  {
    const auto model = GtfModel::make(toy_model(false), seed, DType::F64);
    const Tensor feat = random_tensor({1, 8, 9, 3, 3}, rng);
    const Tensor lr = random_tensor({1, 1, 9, 3, 3}, rng, 0.0, 1.0);
    run("pixel_shuffle_head", [&] { return projection_loss(model.reconstruct(feat, lr), probe); },
        {feat, lr, model.head_expand.weight, model.head_out.weight, model.head_out.bias});
  }
  {
    const Tensor pred = random_tensor({1, 1, 4, 4, 4}, rng, 0.0, 1.0);
    const Tensor target = random_tensor({1, 1, 4, 4, 4}, rng, 0.0, 1.0);
    for (double k : {0.5, 0.8, 1.0})
      run("ohem_loss_k" + std::to_string(static_cast<int>(std::lround(k * 100))), [&] { return charbonnier_ohem(pred, target, k, 1e-3); }, {pred});
  }
  {
    const auto model = GtfModel::make(toy_model(false), seed, DType::F64);
    const Tensor lr = random_tensor({1, 1, 9, 8, 8}, rng, 0.0, 1.0);
    std::vector<Tensor> wrt = model.parameters().tensors();
    wrt.push_back(lr);
    run("model_end_to_end", [&] { return projection_loss(model.forward_y(lr), probe); }, wrt);
  }
  return out;
}

}  // namespace omni
