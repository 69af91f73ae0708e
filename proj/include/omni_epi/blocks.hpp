// SPDX-License-Identifier: Apache-2.0
//
// EPI Transformer branch, topology-preserving FFN, adaptive directional
// fusion and the Omni-EPI block that ties them together.

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "omni_epi/geometry.hpp"
#include "omni_epi/nn.hpp"

namespace omni {

struct BranchConfig {
  std::int64_t channels = 32;
  std::int64_t heads = 4;
  double layerscale_init = 1e-2;
  double droppath_rate = 0.0;
  /// Band half-width over the spatial token axis; absent means full attention.
  std::optional<std::int64_t> local_window;
  std::int64_t ffn_ratio = 2;
  /// false selects the pointwise (1D) FFN used as the ablation baseline.
  bool tp_ffn = true;

  void validate() const;
};

struct FusionConfig {
  std::int64_t channels = 32;
  /// Bottleneck divisor rho of the fidelity gate network.
  std::int64_t reduction = 4;
  /// Two-layer MLP C -> C/2 -> 3C with sigmoid gates.
  bool tiny_mode = false;
  Kernel3 kernel{3, 3, 3};

  void validate() const;
  std::int64_t hidden() const { return tiny_mode ? channels / 2 : channels / reduction; }
};

/// Row-major (L x L) mask over a rows x cols token grid: token (p, q) may
/// attend to (p', q') iff |q - q'| <= window.
std::vector<std::uint8_t> band_mask(std::int64_t rows, std::int64_t cols, std::int64_t window);

class MultiHeadAttention {
 public:
  static MultiHeadAttention make(std::int64_t channels, std::int64_t heads, Initializer& init);

  /// tokens (S, L, C). When `weights` is given it receives the (S, heads, L, L)
  /// attention probabilities.
  Tensor forward(const Tensor& tokens, const std::vector<std::uint8_t>* mask = nullptr,
                 Tensor* weights = nullptr) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

  Linear qkv;
  Linear proj;
  std::int64_t heads = 1;
};

/// LN -> 1x1 expand -> 3x3 depthwise over the token grid -> GELU -> 1x1
/// project. The pointwise variant skips the depthwise step.
class FeedForward {
 public:
  static FeedForward make(std::int64_t channels, std::int64_t ratio, bool topology, Initializer& init);

  Tensor forward(const Tensor& tokens, std::int64_t rows, std::int64_t cols) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

  LayerNorm norm;
  Linear expand;
  Conv3d depthwise;
  Linear project;
  bool topology = true;
};

class EpiBranch {
 public:
  static EpiBranch make(const BranchConfig& cfg, Initializer& init);

  /// tokens (S, L, C) on a rows x cols grid. In training mode with a non-zero
  /// rate each residual branch is dropped per sequence.
  Tensor forward(const Tensor& tokens, std::int64_t rows, std::int64_t cols, bool training = false,
                 std::mt19937_64* rng = nullptr) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

  BranchConfig config;
  LayerNorm norm1;
  MultiHeadAttention attention;
  Tensor gamma1;
  LayerNorm norm2;
  FeedForward ffn;
  Tensor gamma2;
};

class DirectionalFusion {
 public:
  static DirectionalFusion make(const FusionConfig& cfg, std::int64_t directions, bool adaptive,
                                Initializer& init);

  /// Channel descriptor: spatial-angular mean of the branch sum, (B, C).
  static Tensor descriptor(const std::vector<Tensor>& branches);
  /// Gates (B, directions*C).
  Tensor gates(const Tensor& descriptor) const;
  /// Conv3D(sum_k g_k * F_k) + Fin; plain sum when not adaptive.
  Tensor forward(const std::vector<Tensor>& branches, const Tensor& input, Tensor* gates_out = nullptr) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

  FusionConfig config;
  std::int64_t directions = 3;
  bool adaptive = true;
  Linear reduce;
  Linear expand;
  Conv3d conv;
};

struct BlockConfig {
  BranchConfig branch;
  FusionConfig fusion;
  Kernel3 refine_kernel{3, 3, 3};
  bool share_hv = true;
  bool use_diagonal = true;
  bool use_fusion = true;
};

/// Intermediates captured for inspection.
struct BlockTrace {
  Tensor horizontal;
  Tensor vertical;
  Tensor diagonal_scatter;
  Tensor diagonal;
  Tensor gates;
};

class OmniEpiBlock {
 public:
  static OmniEpiBlock make(const BlockConfig& cfg, Initializer& init);

  LightField forward(const LightField& in, bool training = false, std::mt19937_64* rng = nullptr,
                     BlockTrace* trace = nullptr) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

  BlockConfig config;
  std::shared_ptr<EpiBranch> horizontal;
  std::shared_ptr<EpiBranch> vertical;
  std::shared_ptr<EpiBranch> diagonal;
  Conv3d refine;
  DirectionalFusion fusion;
};

/// F0 + P_ang with P_ang (1, C, U*V, 1, 1).
Tensor angular_pos_embed(const Tensor& features, const Tensor& embedding);

/// Channel concatenation of the tapped features followed by a pointwise conv.
class MultiLevelAggregation {
 public:
  static MultiLevelAggregation make(std::int64_t channels, std::int64_t taps, Initializer& init);
  Tensor forward(const std::vector<Tensor>& features) const;
  void collect(const std::string& prefix, ParameterSet& out) const;

  Conv3d conv;
  std::int64_t taps = 3;
};

}  // namespace omni
