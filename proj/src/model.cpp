// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/model.hpp"

#include <algorithm>

#include "omni_epi/image.hpp"

namespace omni {

using std::int64_t;

const char* variant_name(Variant v) { return v == Variant::Gtf ? "gtf" : "gtf_tiny"; }

namespace {

std::string kernel_str(const Kernel3& k) {
  return std::to_string(k[0]) + "x" + std::to_string(k[1]) + "x" + std::to_string(k[2]);
}

Kernel3 parse_kernel(const std::string& key, const std::string& value) {
  const auto v = parse_int_list(key, value, 'x');
  if (v.size() != 3) throw ConfigError("key '" + key + "': expected DxHxW, got '" + value + "'");
  for (auto e : v) {
    if (e < 1 || e % 2 == 0) throw ConfigError("key '" + key + "': kernel extents must be odd and positive");
  }
  return {v[0], v[1], v[2]};
}

int64_t kvol(const Kernel3& k) { return k[0] * k[1] * k[2]; }

}  // namespace

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "gtf_tiny") return c;
  if (name == "gtf") {
    c.variant = Variant::Gtf;
    c.channels = 128;
    c.blocks = 8;
    c.heads = 8;
    c.ffn_ratio = 4;
    c.droppath = 0.1;
    c.local_window = 31;
    c.mla_taps.clear();
    c.macpi_prior = true;
    c.angular_embed = false;
    c.share_hv = true;
    c.fusion_tiny = false;
    c.refine_kernel = {3, 3, 3};
    c.fusion_kernel = {3, 3, 3};
    return c;
  }
  if (name == "nano") {
    c.channels = 8;
    c.blocks = 2;
    c.heads = 2;
    c.angular_u = c.angular_v = 3;
    c.scale = 2;
    c.mla_taps = {1, 2};
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected gtf, gtf_tiny or nano)");
}

void ModelConfig::validate() const {
  if (channels < 1 || blocks < 1 || heads < 1) throw ConfigError("channels, blocks and heads must be positive");
  if (channels % heads)
    throw ConfigError("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  if (ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
  if (scale < 1) throw ConfigError("scale must be a positive integer");
  if (angular_u < 1 || angular_v < 1) throw ConfigError("angular extents must be positive");
  if (diagonal && angular_u != angular_v) throw ConfigError("the diagonal branch needs angular_u == angular_v");
  if (variant == Variant::GtfTiny && local_window) throw ConfigError("gtf_tiny uses full attention; unset local_window");
  for (std::size_t i = 0; i < mla_taps.size(); ++i) {
    if (mla_taps[i] < 1 || mla_taps[i] > blocks)
      throw ConfigError("mla tap " + std::to_string(mla_taps[i]) + " outside 1.." + std::to_string(blocks));
    if (i && mla_taps[i] <= mla_taps[i - 1]) throw ConfigError("mla taps must be strictly increasing");
  }
  block_config().branch.validate();
  block_config().fusion.validate();
}

BlockConfig ModelConfig::block_config() const {
  BlockConfig b;
  b.branch.channels = channels;
  b.branch.heads = heads;
  b.branch.layerscale_init = layerscale_init;
  b.branch.droppath_rate = droppath;
  b.branch.local_window = local_window;
  b.branch.ffn_ratio = ffn_ratio;
  b.branch.tp_ffn = tp_ffn;
  b.fusion.channels = channels;
  b.fusion.reduction = fusion_reduction;
  b.fusion.tiny_mode = fusion_tiny;
  b.fusion.kernel = fusion_kernel;
  b.refine_kernel = refine_kernel;
  b.share_hv = share_hv;
  b.use_diagonal = diagonal;
  b.use_fusion = fusion;
  return b;
}

KeyValues ModelConfig::to_key_values() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"variant", variant_name(variant)},
      {"channels", std::to_string(channels)},
      {"blocks", std::to_string(blocks)},
      {"heads", std::to_string(heads)},
      {"ffn_ratio", std::to_string(ffn_ratio)},
      {"scale", std::to_string(scale)},
      {"angular_u", std::to_string(angular_u)},
      {"angular_v", std::to_string(angular_v)},
      {"droppath", format_double(droppath)},
      {"layerscale_init", format_double(layerscale_init)},
      {"local_window", local_window ? std::to_string(*local_window) : "none"},
      {"mla_taps", format_int_list(mla_taps)},
      {"macpi_prior", b(macpi_prior)},
      {"angular_embed", b(angular_embed)},
      {"share_hv", b(share_hv)},
      {"diagonal", b(diagonal)},
      {"fusion", b(fusion)},
      {"tp_ffn", b(tp_ffn)},
      {"fusion_tiny", b(fusion_tiny)},
      {"fusion_reduction", std::to_string(fusion_reduction)},
      {"refine_kernel", kernel_str(refine_kernel)},
      {"fusion_kernel", kernel_str(fusion_kernel)},
  };
}

void ModelConfig::apply(KeyReader& r) {
  if (auto v = r.take("variant")) {
    if (*v == "gtf")
      variant = Variant::Gtf;
    else if (*v == "gtf_tiny")
      variant = Variant::GtfTiny;
    else
      throw ConfigError("key 'variant': expected gtf or gtf_tiny, got '" + *v + "'");
  }
  r.read("channels", channels);
  r.read("blocks", blocks);
  r.read("heads", heads);
  r.read("ffn_ratio", ffn_ratio);
  r.read("scale", scale);
  r.read("angular_u", angular_u);
  r.read("angular_v", angular_v);
  r.read("droppath", droppath);
  r.read("layerscale_init", layerscale_init);
  if (auto v = r.take("local_window")) {
    if (*v == "none")
      local_window.reset();
    else
      local_window = parse_int("local_window", *v);
  }
  if (auto v = r.take("mla_taps")) mla_taps = parse_int_list("mla_taps", *v);
  r.read("macpi_prior", macpi_prior);
  r.read("angular_embed", angular_embed);
  r.read("share_hv", share_hv);
  r.read("diagonal", diagonal);
  r.read("fusion", fusion);
  r.read("tp_ffn", tp_ffn);
  r.read("fusion_tiny", fusion_tiny);
  r.read("fusion_reduction", fusion_reduction);
  if (auto v = r.take("refine_kernel")) refine_kernel = parse_kernel("refine_kernel", *v);
  if (auto v = r.take("fusion_kernel")) fusion_kernel = parse_kernel("fusion_kernel", *v);
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  KeyReader r(kv);
  c.apply(r);
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

Tensor pixel_shuffle(const Tensor& x, int64_t a) {
  if (a < 1) throw ConfigError("pixel shuffle factor must be positive");
  if (x.rank() != 5 || x.dim(1) % (a * a))
    throw ShapeError("pixel_shuffle: expected (B, C*a*a, A, H, W), got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), C = x.dim(1) / (a * a), A = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor t = ops::reshape(x, {B, C, a, a, A, H, W});
  t = ops::permute(t, {0, 1, 4, 5, 2, 6, 3});
  return ops::reshape(t, {B, C, A, H * a, W * a});
}

GtfModel GtfModel::make(const ModelConfig& cfg, std::uint64_t seed, DType dtype) {
  cfg.validate();
  GtfModel m;
  m.config_ = cfg;
  m.dtype_ = dtype;
  Initializer init(seed, dtype);
  const int64_t C = cfg.channels, A = cfg.angular_u * cfg.angular_v;

  m.shallow = Conv3d::make(1, C, {3, 3, 3}, init);
  m.shallow.collect("shallow", m.params_);
  if (cfg.macpi_prior) {
    m.prior_conv = Conv3d::make(1, C, {1, 3, 3}, init, {1, cfg.angular_u, cfg.angular_v});
    m.prior_fuse = Conv3d::make(2 * C, C, {1, 1, 1}, init);
    m.prior_conv.collect("prior.conv", m.params_);
    m.prior_fuse.collect("prior.fuse", m.params_);
  }
  if (cfg.angular_embed) {
    m.angular_embedding = init.zeros({1, C, A, 1, 1});
    m.angular_embedding.set_requires_grad(true);
    m.params_.add("angular_embed", m.angular_embedding);
  }
  const BlockConfig bc = cfg.block_config();
  for (int64_t i = 0; i < cfg.blocks; ++i) {
    m.stack.push_back(OmniEpiBlock::make(bc, init));
    m.stack.back().collect("block" + std::to_string(i + 1), m.params_);
  }
  if (!cfg.mla_taps.empty()) {
    m.mla = MultiLevelAggregation::make(C, static_cast<int64_t>(cfg.mla_taps.size()), init);
    m.mla.collect("mla", m.params_);
  }
  m.head_expand = Conv3d::make(C, C * cfg.scale * cfg.scale, {1, 1, 1}, init);
  m.head_out = Conv3d::make(C, 1, {1, 3, 3}, init);
  m.head_expand.collect("head.expand", m.params_);
  m.head_out.collect("head.out", m.params_);
  return m;
}

Tensor GtfModel::shallow_features(const Tensor& lr_y) const {
  const int64_t A = config_.angular_u * config_.angular_v;
  if (lr_y.rank() != 5 || lr_y.dim(1) != 1 || lr_y.dim(2) != A)
    throw ShapeError("model input must be (B, 1, " + std::to_string(A) + ", H, W), got " + shape_str(lr_y.shape()));
  if (lr_y.dtype() != dtype_) throw ContractError("model input dtype differs from the model dtype");
  return shallow(lr_y);
}

Tensor GtfModel::macpi_prior(const Tensor& lr_y) const {
  if (!config_.macpi_prior) throw ContractError("macpi prior is disabled in this configuration");
  const int64_t U = config_.angular_u, V = config_.angular_v;
  const LightField lf(lr_y, U, V);
  const int64_t B = lf.batch(), H = lf.height(), W = lf.width(), C = config_.channels;
  Tensor mac = ops::reshape(to_macpi(lf).tensor, {B, 1, 1, U * H, V * W});
  EpiView out;
  out.tensor = ops::reshape(prior_conv(mac), {B, C, U * H, V * W});
  out.direction = EpiDirection::MacPI;
  out.u = U;
  out.v = V;
  out.height = H;
  out.width = W;
  return from_macpi(out).tensor();
}

Tensor GtfModel::initial_features(const Tensor& lr_y) const {
  Tensor f = shallow_features(lr_y);
  if (config_.macpi_prior) {
    const Tensor parts[] = {f, macpi_prior(lr_y)};
    f = prior_fuse(ops::concat(parts, 1));
  }
  if (config_.angular_embed) f = angular_pos_embed(f, angular_embedding);
  return f;
}

Tensor GtfModel::body(const Tensor& f0, bool training, std::mt19937_64* rng) const {
  LightField x(f0, config_.angular_u, config_.angular_v);
  std::vector<Tensor> taps;
  for (int64_t i = 0; i < config_.blocks; ++i) {
    x = stack[static_cast<std::size_t>(i)].forward(x, training, rng);
    if (std::find(config_.mla_taps.begin(), config_.mla_taps.end(), i + 1) != config_.mla_taps.end())
      taps.push_back(x.tensor());
  }
  if (taps.empty()) return ops::add(x.tensor(), f0);
  return ops::add(mla.forward(taps), x.tensor());
}

Tensor GtfModel::reconstruct(const Tensor& features, const Tensor& lr_y) const {
  const int64_t a = config_.scale;
  Tensor hr = head_out(pixel_shuffle(head_expand(features), a));
  return ops::add(hr, image::bicubic_resize(lr_y, lr_y.dim(3) * a, lr_y.dim(4) * a));
}

Tensor GtfModel::forward_y(const Tensor& lr_y, bool training, std::mt19937_64* rng) const {
  return reconstruct(body(initial_features(lr_y), training, rng), lr_y);
}

Tensor GtfModel::forward_rgb(const Tensor& lr_rgb) const {
  if (lr_rgb.rank() != 5 || lr_rgb.dim(1) != 3)
    throw ShapeError("forward_rgb: expected (B, 3, A, H, W), got " + shape_str(lr_rgb.shape()));
  const int64_t a = config_.scale;
  Tensor ycc = image::rgb_to_ycbcr(lr_rgb, 1);
  Tensor y = forward_y(ops::slice(ycc, 1, 0, 1));
  Tensor chroma = image::bicubic_resize(ops::slice(ycc, 1, 1, 2), lr_rgb.dim(3) * a, lr_rgb.dim(4) * a);
  const Tensor parts[] = {y, chroma};
  return ops::clamp(image::ycbcr_to_rgb(ops::concat(parts, 1), 1), 0.0, 1.0);
}

void GtfModel::load(const NamedTensors& values) {
  for (const auto& [name, t] : values) {
    if (!params_.find(name)) throw ConfigError("checkpoint tensor '" + name + "' is not a model parameter");
  }
  for (auto& p : params_.items()) {
    const Tensor* src = nullptr;
    for (const auto& [name, t] : values) {
      if (name == p.name) src = &t;
    }
    if (!src) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    if (src->shape() != p.tensor.shape())
      throw ConfigError("parameter '" + p.name + "' has shape " + shape_str(src->shape()) + ", model expects " +
                        shape_str(p.tensor.shape()));
    p.tensor.mutable_buffer() = src->to(dtype_).buffer();
  }
}

NamedTensors GtfModel::snapshot() const {
  NamedTensors out;
  for (const auto& p : params_.items()) out.emplace_back(p.name, p.tensor.detach());
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct BranchCost {
  int64_t params = 0;
  int64_t flops = 0;
};

BranchCost branch_cost(const ModelConfig& c, int64_t sequences, int64_t length) {
  const int64_t C = c.channels, R = c.ffn_ratio * C, T = sequences * length;
  BranchCost b;
  b.params = 2 * C + (3 * C * C + 3 * C) + (C * C + C) + C + 2 * C + 2 * C + (R * C + R) + (R * C + C) + C;
  b.flops = 2 * T * (3 * C * C + C * C + 2 * R * C) + 4 * sequences * length * length * C;
  if (c.tp_ffn) {
    b.params += 9 * R + R;
    b.flops += 2 * T * 9 * R;
  }
  return b;
}

}  // namespace

std::vector<BudgetRow> budget_table(const ModelConfig& c, int64_t h, int64_t w) {
  c.validate();
  const int64_t C = c.channels, U = c.angular_u, V = c.angular_v, A = U * V, N = c.blocks;
  const int64_t P = A * h * w, a2 = c.scale * c.scale;
  std::vector<BudgetRow> rows;
  rows.push_back({"shallow", 27 * C + C, 2 * 27 * C * P});
  if (c.macpi_prior) rows.push_back({"macpi_prior", (9 * C + C) + (2 * C * C + C), 2 * 9 * C * P + 2 * 2 * C * C * P});
  if (c.angular_embed) rows.push_back({"angular_embed", C * A, 0});

  const BranchCost bh = branch_cost(c, V * w, U * h);
  const BranchCost bv = branch_cost(c, U * h, V * w);
  if (c.share_hv) {
    rows.push_back({"blocks.branch_hv", N * bh.params, N * (bh.flops + bv.flops)});
  } else {
    rows.push_back({"blocks.branch_h", N * bh.params, N * bh.flops});
    rows.push_back({"blocks.branch_v", N * bv.params, N * bv.flops});
  }
  if (c.diagonal) {
    const BranchCost bd = branch_cost(c, 2 * w, U * h);
    rows.push_back({"blocks.branch_d", N * bd.params, N * bd.flops});
    const int64_t k = kvol(c.refine_kernel);
    rows.push_back({"blocks.refine", N * (C * C * k + C), N * 2 * C * C * k * P});
  }
  const int64_t dirs = c.diagonal ? 3 : 2;
  const int64_t hid = c.fusion_tiny ? C / 2 : C / c.fusion_reduction;
  const int64_t kf = kvol(c.fusion_kernel);
  int64_t fp = C * C * kf + C, ff = 2 * C * C * kf * P;
  if (c.fusion) {
    fp += (C * hid + hid) + (hid * dirs * C + dirs * C);
    ff += 2 * (C * hid + hid * dirs * C);
  }
  rows.push_back({"blocks.fusion", N * fp, N * ff});
  if (!c.mla_taps.empty()) {
    const int64_t t = static_cast<int64_t>(c.mla_taps.size());
    rows.push_back({"mla", t * C * C + C, 2 * t * C * C * P});
  }
  rows.push_back({"head", (C * C * a2 + C * a2) + (9 * C + 1), 2 * C * C * a2 * P + 2 * 9 * C * a2 * P});
  return rows;
}

int64_t count_params(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& r : budget_table(cfg, 1, 1)) n += r.params;
  return n;
}

int64_t count_flops(const ModelConfig& cfg, int64_t h, int64_t w) {
  int64_t n = 0;
  for (const auto& r : budget_table(cfg, h, w)) n += r.flops;
  return n;
}

}  // namespace omni
