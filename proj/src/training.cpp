// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "omni_epi/image.hpp"
#include "omni_epi/inference.hpp"
#include "omni_epi/io.hpp"

namespace omni {

namespace fs = std::filesystem;
using std::int64_t;

// ---------------------------------------------------------------------------
// Losses

int64_t ohem_count(int64_t total, double k) {
  if (!(k > 0.0) || k > 1.0) throw ConfigError("ohem k must lie in (0, 1], got " + format_double(k));
  const double x = k * static_cast<double>(total);
  const auto n = static_cast<int64_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
  return std::clamp<int64_t>(n, 1, total);
}

std::vector<int64_t> ohem_select(std::span<const double> values, double k) {
  const auto total = static_cast<int64_t>(values.size());
  const int64_t n = ohem_count(total, k);
  std::vector<int64_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) { return values[a] > values[b]; });
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tensor charbonnier_ohem(const Tensor& pred, const Tensor& target, double k, double eps) {
  if (pred.shape() != target.shape())
    throw ShapeError("loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const int64_t total = pred.numel();
  const int64_t n = ohem_count(total, k);
  const Tensor d = ops::sub(pred, target);
  const Tensor per_pixel = ops::reshape(ops::sqrt(ops::add_scalar(ops::mul(d, d), eps * eps)), {total});
  if (n == total) return ops::mean(per_pixel);
  const auto values = per_pixel.to_vector();
  return ops::mean(ops::gather(per_pixel, 0, ohem_select(values, k)));
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  return ops::mean(ops::abs(ops::sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Optimisation

AdamState AdamState::zeros_like(const ParameterSet& params) {
  AdamState s;
  for (const auto& p : params.items()) {
    s.m.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    s.v.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
  }
  return s;
}

bool adam_step(ParameterSet& params, AdamState& st, double lr, const AdamConfig& cfg) {
  auto& items = params.items();
  if (st.m.size() != items.size() || st.v.size() != items.size())
    throw ContractError("adam state does not match the parameter set");
  for (const auto& p : items) {
    if (!p.trainable) continue;
    if (const Buffer* g = p.tensor.grad_buffer()) {
      const bool finite = std::visit(
          [](const auto& v) { return std::all_of(v.begin(), v.end(), [](auto x) { return std::isfinite(x); }); }, *g);
      if (!finite) {
        ++st.skipped;
        return false;
      }
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    if (!p.trainable) continue;
    const Buffer* g = p.tensor.grad_buffer();
    visit_dtype(p.tensor.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto x = p.tensor.mutable_data<T>();
      auto m = st.m[i].mutable_data<T>();
      auto v = st.v[i].mutable_data<T>();
      const T* gd = g ? buf<T>(*g).data() : nullptr;
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double gj = gd ? static_cast<double>(gd[j]) : 0.0;
        const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
        const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        x[j] = static_cast<T>(x[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps));
      }
    });
  }
  return true;
}

double steplr(double lr0, int64_t epoch, int64_t step_size, double gamma) {
  if (step_size < 1) throw ConfigError("step_size must be positive");
  return lr0 * std::pow(gamma, static_cast<double>(epoch / step_size));
}

std::vector<Tensor> ema_init(const ParameterSet& params) {
  std::vector<Tensor> s;
  for (const auto& p : params.items()) s.push_back(p.tensor.detach());
  return s;
}

void ema_update(std::vector<Tensor>& shadow, const ParameterSet& params, double decay) {
  const auto& items = params.items();
  if (shadow.size() != items.size()) throw ContractError("ema shadow does not match the parameter set");
  for (std::size_t i = 0; i < items.size(); ++i) {
    visit_dtype(shadow[i].dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto s = shadow[i].mutable_data<T>();
      const auto p = items[i].tensor.data<T>();
      for (std::size_t j = 0; j < s.size(); ++j)
        s[j] = static_cast<T>(decay * static_cast<double>(s[j]) + (1.0 - decay) * static_cast<double>(p[j]));
    });
  }
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentedPair augment_lf(const LightField& lr, const LightField& hr, const Dihedral& g) {
  if (lr.u() != hr.u() || lr.v() != hr.v()) throw ContractError("augment: LR and HR angular grids differ");
  return {apply_dihedral(lr, g), apply_dihedral(hr, g), g};
}

AugmentedPair augment_lf(const LightField& lr, const LightField& hr, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 7);
  return augment_lf(lr, hr, Dihedral::from_index(pick(rng)));
}

// ---------------------------------------------------------------------------
// Configuration

TrainConfig TrainConfig::preset(const std::string& model_preset) {
  TrainConfig c;
  if (model_preset == "gtf") {
    c.ohem_k = 0.5;
  } else if (model_preset == "nano") {
    c.lr = 2e-3;
    c.batch = 2;
    c.patch = 16;
    c.epochs = 40;
    c.steps_per_epoch = 20;
    c.ema_decay = 0.9;
    c.train_scenes = 4;
    c.val_scenes = 2;
    c.scene_size = 32;
  } else if (model_preset != "gtf_tiny") {
    throw ConfigError("unknown preset '" + model_preset + "'");
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (step_size < 1 || batch < 1 || patch < 1 || epochs < 0 || steps_per_epoch < 1)
    throw ConfigError("step_size, batch, patch and steps_per_epoch must be positive");
  ohem_count(1, ohem_k);
  if (!(charbonnier_eps > 0.0)) throw ConfigError("charbonnier_eps must be positive");
  if (ema_decay < 0.0 || ema_decay > 1.0) throw ConfigError("ema_decay must lie in [0, 1]");
  if (data_dir.empty() && (train_scenes < 1 || val_scenes < 1 || scene_size < 1 || max_disparity < 0))
    throw ConfigError("synthetic data needs positive scene counts and size");
}

KeyValues TrainConfig::to_key_values() const {
  return {
      {"lr", format_double(lr)},
      {"step_size", std::to_string(step_size)},
      {"gamma", format_double(gamma)},
      {"batch", std::to_string(batch)},
      {"patch", std::to_string(patch)},
      {"epochs", std::to_string(epochs)},
      {"steps_per_epoch", std::to_string(steps_per_epoch)},
      {"ohem_k", format_double(ohem_k)},
      {"charbonnier_eps", format_double(charbonnier_eps)},
      {"ema_decay", format_double(ema_decay)},
      {"seed", std::to_string(seed)},
      {"loss", loss == LossKind::L1 ? "l1" : "ohem"},
      {"augment", augment ? "true" : "false"},
      {"train_scenes", std::to_string(train_scenes)},
      {"val_scenes", std::to_string(val_scenes)},
      {"scene_size", std::to_string(scene_size)},
      {"max_disparity", std::to_string(max_disparity)},
      {"data_dir", data_dir.empty() ? "none" : data_dir},
  };
}

void TrainConfig::apply(KeyReader& r) {
  r.read("lr", lr);
  r.read("step_size", step_size);
  r.read("gamma", gamma);
  r.read("batch", batch);
  r.read("patch", patch);
  r.read("epochs", epochs);
  r.read("steps_per_epoch", steps_per_epoch);
  r.read("ohem_k", ohem_k);
  r.read("charbonnier_eps", charbonnier_eps);
  r.read("ema_decay", ema_decay);
  r.read("seed", seed);
  if (auto v = r.take("loss")) {
    if (*v == "l1")
      loss = LossKind::L1;
    else if (*v == "ohem")
      loss = LossKind::Ohem;
    else
      throw ConfigError("key 'loss': expected l1 or ohem, got '" + *v + "'");
  }
  r.read("augment", augment);
  r.read("train_scenes", train_scenes);
  r.read("val_scenes", val_scenes);
  r.read("scene_size", scene_size);
  r.read("max_disparity", max_disparity);
  if (auto v = r.take("data_dir")) data_dir = *v == "none" ? std::string() : *v;
}

// ---------------------------------------------------------------------------
// Data

Tensor luminance(const Tensor& lf) {
  if (lf.rank() != 5) throw ShapeError("luminance: expected (B, C, A, H, W), got " + shape_str(lf.shape()));
  if (lf.dim(1) == 1) return lf;
  if (lf.dim(1) != 3) throw ShapeError("luminance: expected 1 or 3 channels, got " + shape_str(lf.shape()));
  return ops::slice(image::rgb_to_ycbcr(lf, 1), 1, 0, 1);
}

std::vector<SceneRecord> synthetic_scenes(const ModelConfig& model, const TrainConfig& train, bool validation) {
  const int64_t count = validation ? train.val_scenes : train.train_scenes;
  std::mt19937_64 rng(train.seed * 0x9E3779B97F4A7C15ULL + (validation ? 1 : 0));
  std::uniform_int_distribution<int64_t> disp(-train.max_disparity, train.max_disparity);
  std::uniform_int_distribution<int> layers(1, 2);
  std::vector<SceneRecord> out;
  for (int64_t i = 0; i < count; ++i) {
    SceneRecipe r;
    r.u = model.angular_u;
    r.v = model.angular_v;
    r.height = r.width = train.scene_size;
    r.channels = 3;
    r.disparities.clear();
    const int n = layers(rng);
    for (int l = 0; l < n; ++l) r.disparities.push_back(static_cast<double>(disp(rng)));
    r.style = (i % 2 == 0) ? TextureStyle::Blocks : TextureStyle::Smooth;
    const std::uint64_t scene_seed = rng();
    out.push_back({gen_synthetic_lf(r, model.scale, scene_seed), r.disparities});
  }
  return out;
}

Dataset make_synthetic_dataset(const ModelConfig& model, const TrainConfig& train, DType dtype) {
  Dataset d;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& s : synthetic_scenes(model, train, pass == 1)) {
      Sample smp{luminance(s.pair.lr).to(dtype), luminance(s.pair.hr).to(dtype)};
      (pass == 0 ? d.train : d.val).push_back(std::move(smp));
    }
  }
  return d;
}

void write_dataset(const std::string& dir, const ModelConfig& model, const TrainConfig& train) {
  fs::create_directories(dir);
  std::ostringstream index;
  index << "angular_u=" << model.angular_u << "\nangular_v=" << model.angular_v << "\nscale=" << model.scale << "\n";
  for (int pass = 0; pass < 2; ++pass) {
    const auto scenes = synthetic_scenes(model, train, pass == 1);
    std::string names;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%s_%03zu", pass == 0 ? "train" : "val", i);
      std::vector<std::int64_t> d;
      for (double x : scenes[i].disparities) d.push_back(static_cast<int64_t>(x));
      const KeyValues meta{{"disparities", format_int_list(d)}, {"scene", name}};
      const auto base = fs::path(dir) / name;
      write_bundle((base / "hr").string(), {scenes[i].pair.hr, model.angular_u, model.angular_v, meta});
      write_bundle((base / "lr").string(), {scenes[i].pair.lr, model.angular_u, model.angular_v, meta});
      names += (names.empty() ? "" : ",") + std::string(name);
    }
    index << (pass == 0 ? "train=" : "val=") << names << "\n";
  }
  std::ofstream f(fs::path(dir) / "dataset.txt");
  if (!f) throw IoError("cannot write dataset index in '" + dir + "'");
  f << index.str();
}

Dataset load_dataset(const std::string& dir, DType dtype) {
  const KeyValues kv = read_key_values((fs::path(dir) / "dataset.txt").string());
  Dataset d;
  for (const char* split : {"train", "val"}) {
    const auto it = kv.find(split);
    if (it == kv.end() || it->second.empty()) throw IoError(std::string("dataset index lacks '") + split + "'");
    std::istringstream names(it->second);
    std::string name;
    while (std::getline(names, name, ',')) {
      const auto base = fs::path(dir) / name;
      Sample s{luminance(read_bundle((base / "lr").string()).tensor).to(dtype),
               luminance(read_bundle((base / "hr").string()).tensor).to(dtype)};
      (std::string(split) == "train" ? d.train : d.val).push_back(std::move(s));
    }
  }
  return d;
}

Sample sample_batch(const Dataset& data, const TrainConfig& cfg, int64_t scale, int64_t u, int64_t v,
                    std::mt19937_64& rng) {
  if (data.train.empty()) throw ContractError("empty training set");
  std::vector<Tensor> lrs, hrs;
  for (int64_t b = 0; b < cfg.batch; ++b) {
    std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
    const Sample& s = data.train[pick(rng)];
    const int64_t h = s.lr.dim(3), w = s.lr.dim(4);
    const int64_t p = std::min({cfg.patch, h, w});
    std::uniform_int_distribution<int64_t> py(0, h - p), px(0, w - p);
    const int64_t y = py(rng), x = px(rng);
    Tensor lr = ops::slice(ops::slice(s.lr, 3, y, p), 4, x, p);
    Tensor hr = ops::slice(ops::slice(s.hr, 3, y * scale, p * scale), 4, x * scale, p * scale);
    if (cfg.augment) {
      std::uniform_int_distribution<int> g(0, u == v ? 7 : 3);
      auto aug = augment_lf(LightField(lr, u, v), LightField(hr, u, v), Dihedral::from_index(g(rng)));
      lr = aug.lr.tensor();
      hr = aug.hr.tensor();
    }
    lrs.push_back(lr);
    hrs.push_back(hr);
  }
  return {ops::concat(lrs, 0), ops::concat(hrs, 0)};
}

double validate_psnr(const GtfModel& model, const std::vector<Sample>& val) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : val) total += psnr_y(ops::clamp(model.forward_y(s.lr), 0.0, 1.0), s.hr);
  return total / static_cast<double>(std::max<std::size_t>(val.size(), 1));
}

double bicubic_psnr(const std::vector<Sample>& val, int64_t scale) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : val) {
    const Tensor up = image::bicubic_resize(s.lr, s.lr.dim(3) * scale, s.lr.dim(4) * scale);
    total += psnr_y(ops::clamp(up, 0.0, 1.0), s.hr);
  }
  return total / static_cast<double>(std::max<std::size_t>(val.size(), 1));
}

// ---------------------------------------------------------------------------
// Loop

TrainState TrainState::fresh(const ModelConfig& cfg, const TrainConfig& train, DType dtype) {
  TrainState s{GtfModel::make(cfg, train.seed, dtype), {}, {}, 0, 0, -1e300, std::mt19937_64(train.seed + 1)};
  s.adam = AdamState::zeros_like(s.model.parameters());
  s.ema = ema_init(s.model.parameters());
  return s;
}

std::string MetricRow::to_line() const {
  std::string out = std::to_string(step) + "," + std::to_string(epoch) + "," + format_double(lr) + "," +
                    format_double(loss) + ",";
  if (val_psnr) out += format_metric(*val_psnr);
  return out;
}

void with_ema_weights(TrainState& state, const std::function<void()>& fn) {
  auto& items = state.model.parameters().items();
  std::vector<Buffer> raw;
  for (std::size_t i = 0; i < items.size(); ++i) {
    raw.push_back(items[i].tensor.buffer());
    items[i].tensor.mutable_buffer() = state.ema[i].buffer();
  }
  try {
    fn();
  } catch (...) {
    for (std::size_t i = 0; i < items.size(); ++i) items[i].tensor.mutable_buffer() = std::move(raw[i]);
    throw;
  }
  for (std::size_t i = 0; i < items.size(); ++i) items[i].tensor.mutable_buffer() = std::move(raw[i]);
}

TrainResult train_loop(TrainState& state, const TrainConfig& cfg, const Dataset& data, const TrainOptions& opt) {
  cfg.validate();
  const ModelConfig& mc = state.model.config();
  std::ofstream log;
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    const auto path = fs::path(opt.out_dir) / "metrics.csv";
    const bool fresh_log = !fs::exists(path);
    log.open(path, std::ios::app);
    if (!log) throw IoError("cannot open metrics log in '" + opt.out_dir + "'");
    if (fresh_log) log << "step,epoch,lr,loss,val_psnr\n";
  }
  auto save = [&](const std::string& name) {
    if (!opt.out_dir.empty()) save_checkpoint((fs::path(opt.out_dir) / name).string(), make_checkpoint(state, cfg));
  };

  std::vector<Tensor> params = state.model.parameters().tensors();
  TrainResult result;
  int64_t done = 0;
  while (state.epoch < cfg.epochs) {
    const double lr = steplr(cfg.lr, state.epoch, cfg.step_size, cfg.gamma);
    for (int64_t k = state.step - state.epoch * cfg.steps_per_epoch; k < cfg.steps_per_epoch; ++k) {
      if (opt.max_steps > 0 && done >= opt.max_steps) {
        save("last.ckpt");
        return result;
      }
      const Sample batch = sample_batch(data, cfg, mc.scale, mc.angular_u, mc.angular_v, state.rng);
      const Tensor pred = state.model.forward_y(batch.lr, true, &state.rng);
      const Tensor loss = cfg.loss == LossKind::L1 ? l1_loss(pred, batch.hr)
                                                   : charbonnier_ohem(pred, batch.hr, cfg.ohem_k, cfg.charbonnier_eps);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        save("last_good.ckpt");
        throw NumericError("non-finite loss at step " + std::to_string(state.step));
      }
      for (auto& p : params) p.clear_grad();
      backward(loss, params);
      adam_step(state.model.parameters(), state.adam, lr);
      ema_update(state.ema, state.model.parameters(), cfg.ema_decay);
      ++state.step;
      ++done;

      MetricRow row{state.step, state.epoch, lr, value, std::nullopt};
      const bool last = k + 1 == cfg.steps_per_epoch || (opt.max_steps > 0 && done == opt.max_steps);
      if (last && !data.val.empty()) {
        double v = 0.0;
        with_ema_weights(state, [&] { v = validate_psnr(state.model, data.val); });
        row.val_psnr = v;
        if (v > state.best_val_psnr) {
          state.best_val_psnr = v;
          with_ema_weights(state, [&] { save("best.ckpt"); });
        }
      }
      if (log.is_open()) log << row.to_line() << "\n" << std::flush;
      if (opt.on_step) opt.on_step(row);
      result.log.push_back(row);
    }
    ++state.epoch;
    save("last.ckpt");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint make_checkpoint(const TrainState& s, const TrainConfig& cfg) {
  Checkpoint ck;
  for (const auto& [k, v] : s.model.config().to_key_values()) ck.header["model." + k] = v;
  for (const auto& [k, v] : cfg.to_key_values()) ck.header["train." + k] = v;
  std::ostringstream rng;
  rng << s.rng;
  ck.header["state.step"] = std::to_string(s.step);
  ck.header["state.epoch"] = std::to_string(s.epoch);
  ck.header["state.best_val_psnr"] = format_double(s.best_val_psnr);
  ck.header["state.adam_t"] = std::to_string(s.adam.t);
  ck.header["state.adam_skipped"] = std::to_string(s.adam.skipped);
  ck.header["state.rng"] = rng.str();
  const auto& items = s.model.parameters().items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    ck.tensors.emplace_back("param/" + items[i].name, items[i].tensor.detach());
    ck.tensors.emplace_back("ema/" + items[i].name, s.ema[i]);
    ck.tensors.emplace_back("adam.m/" + items[i].name, s.adam.m[i]);
    ck.tensors.emplace_back("adam.v/" + items[i].name, s.adam.v[i]);
  }
  return ck;
}

namespace {

KeyValues with_prefix(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv) {
    if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
  }
  return out;
}

std::string header_value(const Checkpoint& ck, const std::string& key) {
  const auto it = ck.header.find(key);
  if (it == ck.header.end()) throw IoError("checkpoint header lacks '" + key + "'");
  return it->second;
}

std::vector<Tensor> ordered(const Checkpoint& ck, const std::string& prefix, const ParameterSet& params,
                            DType dtype) {
  std::vector<Tensor> out;
  for (const auto& p : params.items()) {
    const Tensor* t = ck.find(prefix + p.name);
    if (!t) throw IoError("checkpoint lacks '" + prefix + p.name + "'");
    if (t->shape() != p.tensor.shape()) throw IoError("checkpoint tensor '" + prefix + p.name + "' has the wrong shape");
    out.push_back(t->to(dtype));
  }
  return out;
}

}  // namespace

TrainState restore_checkpoint(const Checkpoint& ck, TrainConfig* cfg, DType dtype) {
  const ModelConfig mc = ModelConfig::from_key_values(with_prefix(ck.header, "model."));
  TrainConfig tc;
  {
    const KeyValues kv = with_prefix(ck.header, "train.");
    KeyReader r(kv);
    tc.apply(r);
    r.finish();
  }
  if (cfg) *cfg = tc;
  TrainState s = TrainState::fresh(mc, tc, dtype);
  s.model.load(ck.group("param/"));
  s.ema = ordered(ck, "ema/", s.model.parameters(), dtype);
  s.adam.m = ordered(ck, "adam.m/", s.model.parameters(), dtype);
  s.adam.v = ordered(ck, "adam.v/", s.model.parameters(), dtype);
  s.step = parse_int("state.step", header_value(ck, "state.step"));
  s.epoch = parse_int("state.epoch", header_value(ck, "state.epoch"));
  s.best_val_psnr = parse_double("state.best_val_psnr", header_value(ck, "state.best_val_psnr"));
  s.adam.t = parse_int("state.adam_t", header_value(ck, "state.adam_t"));
  s.adam.skipped = parse_int("state.adam_skipped", header_value(ck, "state.adam_skipped"));
  std::istringstream rng(header_value(ck, "state.rng"));
  rng >> s.rng;
  if (!rng) throw IoError("checkpoint random state is corrupt");
  return s;
}

GtfModel load_model(const Checkpoint& ck, bool use_ema, DType dtype) {
  const ModelConfig mc = ModelConfig::from_key_values(with_prefix(ck.header, "model."));
  GtfModel m = GtfModel::make(mc, 0, dtype);
  const NamedTensors ema = ck.group("ema/");
  m.load(use_ema && !ema.empty() ? ema : ck.group("param/"));
  return m;
}

}  // namespace omni
