// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/blocks.hpp"

#include <cmath>
#include <cstdlib>

namespace omni {

using std::int64_t;

void BranchConfig::validate() const {
  if (channels < 1 || heads < 1 || channels % heads)
    throw ConfigError("branch: channels " + std::to_string(channels) + " not divisible by heads " +
                      std::to_string(heads));
  if (ffn_ratio < 1) throw ConfigError("branch: ffn_ratio must be >= 1");
  if (droppath_rate < 0.0 || droppath_rate >= 1.0) throw ConfigError("branch: droppath must lie in [0, 1)");
  if (local_window && *local_window < 0) throw ConfigError("branch: local_window must be >= 0");
}

void FusionConfig::validate() const {
  if (tiny_mode) {
    if (channels % 2) throw ConfigError("fusion: channels must be even in tiny mode");
  } else if (reduction < 1 || channels % reduction) {
    throw ConfigError("fusion: channels " + std::to_string(channels) + " not divisible by reduction " +
                      std::to_string(reduction));
  }
}

std::vector<std::uint8_t> band_mask(int64_t rows, int64_t cols, int64_t window) {
  const int64_t L = rows * cols;
  std::vector<std::uint8_t> m(static_cast<std::size_t>(L * L), 0);
  for (int64_t i = 0; i < L; ++i)
    for (int64_t j = 0; j < L; ++j) m[i * L + j] = std::llabs(i % cols - j % cols) <= window ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------

MultiHeadAttention MultiHeadAttention::make(int64_t channels, int64_t heads, Initializer& init) {
  if (heads < 1 || channels % heads) throw ConfigError("attention: channels not divisible by heads");
  MultiHeadAttention m;
  m.qkv = Linear::make(channels, 3 * channels, init);
  m.proj = Linear::make(channels, channels, init);
  m.heads = heads;
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& tokens, const std::vector<std::uint8_t>* mask,
                                   Tensor* weights) const {
  if (tokens.rank() != 3) throw ShapeError("attention: tokens must be (S, L, C), got " + shape_str(tokens.shape()));
  const int64_t S = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2);
  if (C % heads) throw ContractError("attention: channels not divisible by heads");
  const int64_t d = C / heads;
  Tensor packed = ops::permute(ops::reshape(qkv(tokens), {S, L, 3, heads, d}), {2, 0, 3, 1, 4});
  auto part = [&](int64_t k) { return ops::reshape(ops::slice(packed, 0, k, 1), {S * heads, L, d}); };
  const Tensor q = part(0), k = part(1), v = part(2);
  Tensor scores = ops::scale(ops::matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor probs = mask ? ops::masked_softmax(scores, *mask) : ops::softmax(scores);
  if (weights) *weights = ops::reshape(probs, {S, heads, L, L});
  Tensor ctx = ops::matmul(probs, v);
  ctx = ops::reshape(ops::permute(ops::reshape(ctx, {S, heads, L, d}), {0, 2, 1, 3}), {S, L, C});
  return proj(ctx);
}

void MultiHeadAttention::collect(const std::string& prefix, ParameterSet& out) const {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
}

// ---------------------------------------------------------------------------

FeedForward FeedForward::make(int64_t channels, int64_t ratio, bool topology, Initializer& init) {
  FeedForward f;
  const int64_t hidden = channels * ratio;
  f.norm = LayerNorm::make(channels, init);
  f.expand = Linear::make(channels, hidden, init);
  if (topology) f.depthwise = Conv3d::make(hidden, hidden, {1, 3, 3}, init, {1, 1, 1}, hidden);
  f.project = Linear::make(hidden, channels, init);
  f.topology = topology;
  return f;
}

Tensor FeedForward::forward(const Tensor& tokens, int64_t rows, int64_t cols) const {
  const int64_t S = tokens.dim(0), L = tokens.dim(1);
  if (L != rows * cols)
    throw ContractError("ffn: " + std::to_string(L) + " tokens do not form a " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " grid");
  Tensor x = expand(norm(tokens));
  if (topology) {
    const int64_t hidden = x.dim(2);
    Tensor grid = ops::permute(ops::reshape(x, {S, rows, cols, hidden}), {0, 3, 1, 2});
    grid = depthwise(ops::reshape(grid, {S, hidden, 1, rows, cols}));
    x = ops::reshape(ops::permute(ops::reshape(grid, {S, hidden, rows, cols}), {0, 2, 3, 1}), {S, L, hidden});
  }
  return project(ops::gelu(x));
}

void FeedForward::collect(const std::string& prefix, ParameterSet& out) const {
  norm.collect(prefix + ".norm", out);
  expand.collect(prefix + ".expand", out);
  if (topology) depthwise.collect(prefix + ".depthwise", out);
  project.collect(prefix + ".project", out);
}

// ---------------------------------------------------------------------------

namespace {

Tensor drop_path(const Tensor& x, double rate, bool training, std::mt19937_64* rng) {
  if (!training || rate <= 0.0) return x;
  if (!rng) throw ContractError("drop path in training mode needs a random generator");
  std::bernoulli_distribution keep(1.0 - rate);
  const int64_t S = x.dim(0);
  std::vector<double> m(static_cast<std::size_t>(S));
  for (auto& v : m) v = keep(*rng) ? 1.0 / (1.0 - rate) : 0.0;
  return ops::mul(x, Tensor::from_vector({S, 1, 1}, m, x.dtype()));
}

}  // namespace

EpiBranch EpiBranch::make(const BranchConfig& cfg, Initializer& init) {
  cfg.validate();
  EpiBranch b;
  b.config = cfg;
  b.norm1 = LayerNorm::make(cfg.channels, init);
  b.attention = MultiHeadAttention::make(cfg.channels, cfg.heads, init);
  b.gamma1 = init.constant({cfg.channels}, cfg.layerscale_init);
  b.gamma1.set_requires_grad(true);
  b.norm2 = LayerNorm::make(cfg.channels, init);
  b.ffn = FeedForward::make(cfg.channels, cfg.ffn_ratio, cfg.tp_ffn, init);
  b.gamma2 = init.constant({cfg.channels}, cfg.layerscale_init);
  b.gamma2.set_requires_grad(true);
  return b;
}

Tensor EpiBranch::forward(const Tensor& tokens, int64_t rows, int64_t cols, bool training,
                          std::mt19937_64* rng) const {
  std::vector<std::uint8_t> mask;
  if (config.local_window) mask = band_mask(rows, cols, *config.local_window);
  Tensor a = attention.forward(norm1(tokens), config.local_window ? &mask : nullptr);
  Tensor x = ops::add(tokens, ops::mul(gamma1, drop_path(a, config.droppath_rate, training, rng)));
  Tensor f = ffn.forward(norm2(x), rows, cols);
  return ops::add(x, ops::mul(gamma2, drop_path(f, config.droppath_rate, training, rng)));
}

void EpiBranch::collect(const std::string& prefix, ParameterSet& out) const {
  norm1.collect(prefix + ".norm1", out);
  attention.collect(prefix + ".attn", out);
  out.add(prefix + ".gamma1", gamma1);
  norm2.collect(prefix + ".norm2", out);
  ffn.collect(prefix + ".ffn", out);
  out.add(prefix + ".gamma2", gamma2);
}

// ---------------------------------------------------------------------------

DirectionalFusion DirectionalFusion::make(const FusionConfig& cfg, int64_t directions, bool adaptive,
                                          Initializer& init) {
  cfg.validate();
  DirectionalFusion f;
  f.config = cfg;
  f.directions = directions;
  f.adaptive = adaptive;
  if (adaptive) {
    f.reduce = Linear::make(cfg.channels, cfg.hidden(), init);
    f.expand = Linear::make(cfg.hidden(), directions * cfg.channels, init);
  }
  f.conv = Conv3d::make(cfg.channels, cfg.channels, cfg.kernel, init);
  return f;
}

Tensor DirectionalFusion::descriptor(const std::vector<Tensor>& branches) {
  Tensor s = branches.at(0);
  for (std::size_t i = 1; i < branches.size(); ++i) s = ops::add(s, branches[i]);
  return ops::mean(s, {2, 3, 4}, false);
}

Tensor DirectionalFusion::gates(const Tensor& z) const {
  Tensor g = expand(ops::gelu(reduce(z)));
  return config.tiny_mode ? ops::sigmoid(g) : g;
}

Tensor DirectionalFusion::forward(const std::vector<Tensor>& branches, const Tensor& input, Tensor* gates_out) const {
  if (static_cast<int64_t>(branches.size()) != directions)
    throw ContractError("fusion: expected " + std::to_string(directions) + " branches");
  for (const auto& b : branches) {
    if (b.shape() != input.shape())
      throw ShapeError("fusion: branch " + shape_str(b.shape()) + " vs input " + shape_str(input.shape()));
  }
  const int64_t B = input.dim(0), C = input.dim(1);
  Tensor acc;
  if (adaptive) {
    Tensor g = gates(descriptor(branches));
    if (gates_out) *gates_out = g;
    for (int64_t k = 0; k < directions; ++k) {
      Tensor gk = ops::reshape(ops::slice(g, 1, k * C, C), {B, C, 1, 1, 1});
      Tensor term = ops::mul(gk, branches[k]);
      acc = acc.defined() ? ops::add(acc, term) : term;
    }
  } else {
    for (const auto& b : branches) acc = acc.defined() ? ops::add(acc, b) : b;
  }
  return ops::add(conv(acc), input);
}

void DirectionalFusion::collect(const std::string& prefix, ParameterSet& out) const {
  if (adaptive) {
    reduce.collect(prefix + ".reduce", out);
    expand.collect(prefix + ".expand", out);
  }
  conv.collect(prefix + ".conv", out);
}

// ---------------------------------------------------------------------------

OmniEpiBlock OmniEpiBlock::make(const BlockConfig& cfg, Initializer& init) {
  OmniEpiBlock b;
  b.config = cfg;
  b.horizontal = std::make_shared<EpiBranch>(EpiBranch::make(cfg.branch, init));
  b.vertical = cfg.share_hv ? b.horizontal : std::make_shared<EpiBranch>(EpiBranch::make(cfg.branch, init));
  if (cfg.use_diagonal) {
    b.diagonal = std::make_shared<EpiBranch>(EpiBranch::make(cfg.branch, init));
    b.refine = Conv3d::make(cfg.branch.channels, cfg.branch.channels, cfg.refine_kernel, init);
  }
  b.fusion = DirectionalFusion::make(cfg.fusion, cfg.use_diagonal ? 3 : 2, cfg.use_fusion, init);
  return b;
}

LightField OmniEpiBlock::forward(const LightField& in, bool training, std::mt19937_64* rng, BlockTrace* trace) const {
  const int64_t B = in.batch(), C = in.channels();
  const int64_t U = in.u(), V = in.v(), H = in.height(), W = in.width();

  auto run_axis = [&](const EpiBranch& branch, EpiView view) {
    const auto [rows, cols] = view.token_grid();
    const int64_t seqs = view.tensor.dim(2);
    Tensor out = branch.forward(epi_to_tokens(view.tensor), rows, cols, training, rng);
    view.tensor = tokens_to_epi(out, B, C, seqs, rows, cols);
    return from_epi(view).tensor();
  };

  std::vector<Tensor> branches;
  branches.push_back(run_axis(*horizontal, to_horizontal_epi(in)));
  branches.push_back(run_axis(*vertical, to_vertical_epi(in)));

  if (config.use_diagonal) {
    auto [d45, d135] = extract_diagonals(in);
    const Tensor both[] = {epi_to_tokens(d45.tensor), epi_to_tokens(d135.tensor)};
    Tensor out = diagonal->forward(ops::concat(both, 0), U, H, training, rng);
    Tensor p45 = tokens_to_epi(ops::slice(out, 0, 0, B * W), B, C, W, U, H);
    Tensor p135 = tokens_to_epi(ops::slice(out, 0, B * W, B * W), B, C, W, U, H);
    Tensor scattered = scatter_diagonals(p45, p135, in).tensor();
    Tensor fd = ops::add(in.tensor(), refine(scattered));
    if (trace) {
      trace->diagonal_scatter = scattered;
      trace->diagonal = fd;
    }
    branches.push_back(fd);
  }
  if (trace) {
    trace->horizontal = branches[0];
    trace->vertical = branches[1];
  }
  (void)V;
  return in.with(fusion.forward(branches, in.tensor(), trace ? &trace->gates : nullptr));
}

void OmniEpiBlock::collect(const std::string& prefix, ParameterSet& out) const {
  if (config.share_hv) {
    horizontal->collect(prefix + ".branch_hv", out);
  } else {
    horizontal->collect(prefix + ".branch_h", out);
    vertical->collect(prefix + ".branch_v", out);
  }
  if (config.use_diagonal) {
    diagonal->collect(prefix + ".branch_d", out);
    refine.collect(prefix + ".refine", out);
  }
  fusion.collect(prefix + ".fusion", out);
}

// ---------------------------------------------------------------------------

Tensor angular_pos_embed(const Tensor& features, const Tensor& embedding) {
  if (embedding.rank() != 5 || embedding.dim(0) != 1 || embedding.dim(1) != features.dim(1) ||
      embedding.dim(2) != features.dim(2) || embedding.dim(3) != 1 || embedding.dim(4) != 1)
    throw ShapeError("angular embedding " + shape_str(embedding.shape()) + " does not fit features " +
                     shape_str(features.shape()));
  return ops::add(features, embedding);
}

MultiLevelAggregation MultiLevelAggregation::make(int64_t channels, int64_t taps, Initializer& init) {
  MultiLevelAggregation m;
  m.conv = Conv3d::make(taps * channels, channels, {1, 1, 1}, init);
  m.taps = taps;
  return m;
}

Tensor MultiLevelAggregation::forward(const std::vector<Tensor>& features) const {
  if (static_cast<int64_t>(features.size()) != taps)
    throw ContractError("aggregation: expected " + std::to_string(taps) + " features");
  for (const auto& f : features) {
    if (f.shape() != features[0].shape()) throw ShapeError("aggregation: feature shapes differ");
  }
  return conv(ops::concat(features, 1));
}

void MultiLevelAggregation::collect(const std::string& prefix, ParameterSet& out) const {
  conv.collect(prefix + ".conv", out);
}

}  // namespace omni
