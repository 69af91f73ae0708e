// SPDX-License-Identifier: Apache-2.0
//
// Losses, Adam, step schedule, EMA, joint spatial-angular augmentation and
// the training loop over synthetic light fields.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "omni_epi/config.hpp"
#include "omni_epi/geometry.hpp"
#include "omni_epi/model.hpp"
#include "omni_epi/nn.hpp"
#include "omni_epi/synthetic.hpp"

namespace omni {

// ---------------------------------------------------------------------------
// Losses

/// Number of pixels OHEM keeps out of `total`: ceil(k * total).
std::int64_t ohem_count(std::int64_t total, double k);
/// Indices of the ceil(k * P) largest entries, ties resolved by flat index.
std::vector<std::int64_t> ohem_select(std::span<const double> values, double k);
/// Mean of the hardest per-pixel sqrt(d^2 + eps^2) values over the batch; the
/// selection itself carries no gradient.
Tensor charbonnier_ohem(const Tensor& pred, const Tensor& target, double k, double eps);
Tensor l1_loss(const Tensor& pred, const Tensor& target);

// ---------------------------------------------------------------------------
// Optimisation

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t t = 0;
  std::int64_t skipped = 0;

  static AdamState zeros_like(const ParameterSet& params);
};

/// One bias-corrected Adam update of every trainable parameter. A missing
/// gradient counts as zero. Returns false, leaving everything untouched and
/// counting the skip, when any gradient is non-finite.
bool adam_step(ParameterSet& params, AdamState& state, double lr, const AdamConfig& cfg = {});

/// lr0 * gamma^floor(epoch / step_size).
double steplr(double lr0, std::int64_t epoch, std::int64_t step_size, double gamma);

std::vector<Tensor> ema_init(const ParameterSet& params);
/// shadow <- decay * shadow + (1 - decay) * params.
void ema_update(std::vector<Tensor>& shadow, const ParameterSet& params, double decay);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentedPair {
  LightField lr;
  LightField hr;
  Dihedral element;
};

AugmentedPair augment_lf(const LightField& lr, const LightField& hr, const Dihedral& g);
/// Uniformly sampled dihedral element applied to both light fields.
AugmentedPair augment_lf(const LightField& lr, const LightField& hr, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Training loop

enum class LossKind { L1, Ohem };

struct TrainConfig {
  double lr = 4e-4;
  std::int64_t step_size = 80;
  double gamma = 0.5;
  std::int64_t batch = 8;
  /// LR patch size; clipped to the scene size.
  std::int64_t patch = 32;
  std::int64_t epochs = 180;
  std::int64_t steps_per_epoch = 50;
  double ohem_k = 0.8;
  double charbonnier_eps = 1e-3;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::Ohem;
  bool augment = true;
  /// Synthetic data, used when no dataset directory is given.
  std::int64_t train_scenes = 16;
  std::int64_t val_scenes = 4;
  /// HR view size of generated scenes.
  std::int64_t scene_size = 64;
  std::int64_t max_disparity = 2;
  std::string data_dir;

  static TrainConfig preset(const std::string& model_preset);
  void validate() const;
  KeyValues to_key_values() const;
  void apply(KeyReader& reader);
};

struct Sample {
  /// (1, 1, A, h, w) and (1, 1, A, a*h, a*w) luminance.
  Tensor lr;
  Tensor hr;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

struct SceneRecord {
  /// RGB light fields in 64-bit.
  SyntheticPair pair;
  std::vector<double> disparities;
};

/// Deterministic synthetic scenes with one or two layers of integer disparity
/// in [-max_disparity, max_disparity].
std::vector<SceneRecord> synthetic_scenes(const ModelConfig& model, const TrainConfig& train, bool validation);
Dataset make_synthetic_dataset(const ModelConfig& model, const TrainConfig& train, DType dtype);
/// dataset.txt plus one hr/ and lr/ bundle pair per scene.
void write_dataset(const std::string& dir, const ModelConfig& model, const TrainConfig& train);
Dataset load_dataset(const std::string& dir, DType dtype);
/// Luminance of an RGB or grey light-field tensor, (1, 1, A, H, W).
Tensor luminance(const Tensor& lf);

struct TrainState {
  GtfModel model;
  AdamState adam;
  std::vector<Tensor> ema;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double best_val_psnr = -1e300;
  std::mt19937_64 rng;

  static TrainState fresh(const ModelConfig& cfg, const TrainConfig& train, DType dtype);
};

struct MetricRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  /// Set on the last step of an epoch.
  std::optional<double> val_psnr;

  std::string to_line() const;
};

struct TrainOptions {
  /// Checkpoints and the metrics log go here; nothing is written when empty.
  std::string out_dir;
  /// Stop after this many optimiser steps in this call (all epochs when <= 0).
  std::int64_t max_steps = 0;
  std::function<void(const MetricRow&)> on_step;
};

struct TrainResult {
  std::vector<MetricRow> log;
};

/// Samples a training batch: random scene, random aligned LR/HR crop and, if
/// enabled, a random dihedral element.
Sample sample_batch(const Dataset& data, const TrainConfig& cfg, std::int64_t scale, std::int64_t u, std::int64_t v,
                    std::mt19937_64& rng);

/// Mean Y PSNR of the model over the validation scenes, full-frame.
double validate_psnr(const GtfModel& model, const std::vector<Sample>& val);
/// Mean Y PSNR of bicubic upsampling over the same scenes.
double bicubic_psnr(const std::vector<Sample>& val, std::int64_t scale);

TrainResult train_loop(TrainState& state, const TrainConfig& cfg, const Dataset& data, const TrainOptions& opt = {});

/// Runs `fn` with the EMA weights loaded into the model, restoring the raw
/// weights afterwards.
void with_ema_weights(TrainState& state, const std::function<void()>& fn);

Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& cfg);
/// Restores model, optimiser, EMA, counters and RNG.
TrainState restore_checkpoint(const Checkpoint& ckpt, TrainConfig* cfg, DType dtype);
/// Model for inference from a checkpoint, EMA weights when present and asked for.
GtfModel load_model(const Checkpoint& ckpt, bool use_ema, DType dtype);

}  // namespace omni
