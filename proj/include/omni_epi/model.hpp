// SPDX-License-Identifier: Apache-2.0
//
// End-to-end GTF / GTF-Tiny models: shallow 3D features, optional MacPI prior,
// angular embedding, a stack of Omni-EPI blocks, and a pixel-shuffle head
// added to the bicubic-upsampled luminance.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "omni_epi/blocks.hpp"
#include "omni_epi/config.hpp"
#include "omni_epi/geometry.hpp"
#include "omni_epi/nn.hpp"
#include "omni_epi/serialize.hpp"

namespace omni {

enum class Variant { Gtf, GtfTiny };

struct ModelConfig {
  Variant variant = Variant::GtfTiny;
  std::int64_t channels = 32;
  std::int64_t blocks = 6;
  std::int64_t heads = 4;
  std::int64_t ffn_ratio = 2;
  std::int64_t scale = 4;
  std::int64_t angular_u = 5;
  std::int64_t angular_v = 5;
  double droppath = 0.0;
  double layerscale_init = 1e-2;
  std::optional<std::int64_t> local_window;
  /// 1-based block indices feeding the multi-level aggregation; empty selects
  /// the long-skip residual stack.
  std::vector<std::int64_t> mla_taps{1, 3, 5};
  bool macpi_prior = false;
  bool angular_embed = true;
  bool share_hv = false;
  bool diagonal = true;
  bool fusion = true;
  bool tp_ffn = true;
  bool fusion_tiny = true;
  std::int64_t fusion_reduction = 4;
  Kernel3 refine_kernel{1, 3, 3};
  Kernel3 fusion_kernel{1, 1, 1};

  /// "gtf", "gtf_tiny" or "nano".
  static ModelConfig preset(const std::string& name);
  void validate() const;
  BlockConfig block_config() const;

  KeyValues to_key_values() const;
  /// Consumes the model keys present in `reader`.
  void apply(KeyReader& reader);
  static ModelConfig from_key_values(const KeyValues& kv);
};

const char* variant_name(Variant v);

/// (B, C*a*a, A, H, W) -> (B, C, A, a*H, a*W); channel c*a*a + i*a + j lands
/// at spatial offset (i, j).
Tensor pixel_shuffle(const Tensor& x, std::int64_t alpha);

class GtfModel {
 public:
  static GtfModel make(const ModelConfig& cfg, std::uint64_t seed, DType dtype);

  const ModelConfig& config() const { return config_; }
  DType dtype() const { return dtype_; }

  Tensor shallow_features(const Tensor& lr_y) const;
  /// MacPI branch output (B, C, A, H, W), before concatenation.
  Tensor macpi_prior(const Tensor& lr_y) const;
  /// Features entering the block stack.
  Tensor initial_features(const Tensor& lr_y) const;
  /// Deep features before the head.
  Tensor body(const Tensor& f0, bool training = false, std::mt19937_64* rng = nullptr) const;
  Tensor reconstruct(const Tensor& features, const Tensor& lr_y) const;

  /// lr_y (B, 1, A, H, W) in [0, 1] -> (B, 1, A, aH, aW), unclamped.
  Tensor forward_y(const Tensor& lr_y, bool training = false, std::mt19937_64* rng = nullptr) const;
  /// lr_rgb (B, 3, A, H, W) -> clamped (B, 3, A, aH, aW).
  Tensor forward_rgb(const Tensor& lr_rgb) const;

  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }
  /// Copies values into the model; every name must match with equal shape.
  void load(const NamedTensors& values);
  NamedTensors snapshot() const;

  Conv3d shallow;
  Conv3d prior_conv;
  Conv3d prior_fuse;
  Tensor angular_embedding;
  std::vector<OmniEpiBlock> stack;
  MultiLevelAggregation mla;
  Conv3d head_expand;
  Conv3d head_out;

 private:
  ModelConfig config_;
  DType dtype_ = DType::F32;
  ParameterSet params_;
};

struct BudgetRow {
  std::string stage;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

/// Analytic per-stage accounting at a B=1, (U, V, h, w) LR input. FLOPs are
/// 2 x multiply-accumulates of convolutions, linears and attention products.
std::vector<BudgetRow> budget_table(const ModelConfig& cfg, std::int64_t h, std::int64_t w);
std::int64_t count_params(const ModelConfig& cfg);
std::int64_t count_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w);

}  // namespace omni
