// SPDX-License-Identifier: Apache-2.0
//
// omni-epi: data generation, training, inference, evaluation, budget
// inspection and gradient checks.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "omni_epi/config.hpp"
#include "omni_epi/gradcheck.hpp"
#include "omni_epi/inference.hpp"
#include "omni_epi/io.hpp"
#include "omni_epi/model.hpp"
#include "omni_epi/serialize.hpp"
#include "omni_epi/training.hpp"

#ifndef OMNI_EPI_BUILD_ID
#define OMNI_EPI_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace omni;
using std::int64_t;

namespace {

constexpr double kTinyParamLimit = 1.0e6;
constexpr double kTinyFlopLimit = 20.0e9;
constexpr double kTinyPaperParams = 0.915e6;
constexpr double kTinyPaperFlops = 19.8e9;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Global {
  std::string preset = "gtf_tiny";
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out = "omni_epi_run";
  std::string dtype = "f32";
};

struct Resolved {
  ModelConfig model;
  TrainConfig train;
  KeyValues kv;
};

/// Preset, then the config file, then --seed and --set flags. Keys carry a
/// "model." or "train." prefix, matching the checkpoint header.
Resolved resolve_config(const Global& g) {
  Resolved r{ModelConfig::preset(g.preset), TrainConfig::preset(g.preset), {}};
  KeyValues over;
  if (!g.config_file.empty()) over = read_key_values(g.config_file);
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    over[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (g.seed) over["train.seed"] = std::to_string(*g.seed);
  KeyValues model_kv, train_kv;
  for (const auto& [k, v] : over) {
    if (k.rfind("model.", 0) == 0)
      model_kv[k.substr(6)] = v;
    else if (k.rfind("train.", 0) == 0)
      train_kv[k.substr(6)] = v;
    else
      throw ConfigError("unknown config key '" + k + "'");
  }
  auto consume = [](const KeyValues& kv, const std::string& prefix, auto& cfg) {
    const KeyValues known = cfg.to_key_values();
    for (const auto& [k, v] : kv)
      if (!known.count(k)) throw ConfigError("unknown config key '" + prefix + k + "'");
    KeyReader reader(kv);
    cfg.apply(reader);
    reader.finish();
  };
  consume(model_kv, "model.", r.model);
  consume(train_kv, "train.", r.train);
  r.model.validate();
  r.train.validate();
  for (const auto& [k, v] : r.model.to_key_values()) r.kv["model." + k] = v;
  for (const auto& [k, v] : r.train.to_key_values()) r.kv["train." + k] = v;
  return r;
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

class RunManifest {
 public:
  RunManifest(int argc, char** argv) : started_(utc_now()) {
    for (int i = 0; i < argc; ++i) command_ += (i ? " " : "") + std::string(argv[i]);
  }
  void set_out(const std::string& dir) { out_ = dir; }
  void set_config(const KeyValues& kv) { config_ = kv; }
  void set_seed(std::uint64_t s) { seed_ = s; }
  void add_output(const std::string& path) { outputs_.push_back(path); }

  void write(int exit_code) const {
    if (out_.empty()) return;
    std::error_code ec;
    fs::create_directories(out_, ec);
    KeyValues kv{{"command", command_},
                 {"build", OMNI_EPI_BUILD_ID},
                 {"started", started_},
                 {"finished", utc_now()},
                 {"exit_code", std::to_string(exit_code)},
                 {"seed", seed_ ? std::to_string(*seed_) : "none"}};
    for (const auto& [k, v] : config_) kv["config." + k] = v;
    for (std::size_t i = 0; i < outputs_.size(); ++i) {
      char key[32];
      std::snprintf(key, sizeof key, "output.%03zu", i);
      kv[key] = outputs_[i];
    }
    std::ofstream f(fs::path(out_) / "run_manifest.txt");
    f << format_key_values(kv);
  }

 private:
  std::string command_;
  std::string started_;
  std::string out_;
  KeyValues config_;
  std::optional<std::uint64_t> seed_;
  std::vector<std::string> outputs_;
};

void record_config(RunManifest& m, const Resolved& r) {
  m.set_config(r.kv);
  m.set_seed(r.train.seed);
}

Dataset dataset_for(const ModelConfig& mc, const TrainConfig& tc, DType dtype) {
  Dataset d = tc.data_dir.empty() ? make_synthetic_dataset(mc, tc, dtype) : load_dataset(tc.data_dir, dtype);
  for (const auto* split : {&d.train, &d.val}) {
    for (const auto& s : *split) {
      if (s.lr.dim(2) != mc.angular_u * mc.angular_v || s.hr.dim(3) != s.lr.dim(3) * mc.scale ||
          s.hr.dim(4) != s.lr.dim(4) * mc.scale)
        throw ConfigError("dataset does not match the model's angular grid or scale");
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Global& g, RunManifest& m) {
  const Resolved r = resolve_config(g);
  record_config(m, r);
  write_dataset(g.out, r.model, r.train);
  m.add_output((fs::path(g.out) / "dataset.txt").string());
  std::printf("wrote %lld training and %lld validation scenes to %s\n", static_cast<long long>(r.train.train_scenes),
              static_cast<long long>(r.train.val_scenes), g.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string resume;
  std::string data;
  int64_t max_steps = 0;
};

int cmd_train(const Global& g, const TrainArgs& a, RunManifest& m) {
  const DType dtype = parse_dtype(g.dtype);
  Resolved r = resolve_config(g);
  if (!a.data.empty()) r.train.data_dir = a.data;
  std::optional<TrainState> state;
  if (!a.resume.empty()) {
    TrainConfig tc;
    state.emplace(restore_checkpoint(load_checkpoint(a.resume), &tc, dtype));
    if (!a.data.empty()) tc.data_dir = a.data;
    r.model = state->model.config();
    r.train = tc;
    r.kv.clear();
    for (const auto& [k, v] : r.model.to_key_values()) r.kv["model." + k] = v;
    for (const auto& [k, v] : r.train.to_key_values()) r.kv["train." + k] = v;
    std::printf("resuming from %s at step %lld, epoch %lld\n", a.resume.c_str(),
                static_cast<long long>(state->step), static_cast<long long>(state->epoch));
  } else {
    state.emplace(TrainState::fresh(r.model, r.train, dtype));
  }
  record_config(m, r);
  const Dataset data = dataset_for(r.model, r.train, dtype);
  std::printf("bicubic validation PSNR %s dB\n", format_metric(bicubic_psnr(data.val, r.model.scale)).c_str());
  TrainOptions opt;
  opt.out_dir = g.out;
  opt.max_steps = a.max_steps;
  opt.on_step = [](const MetricRow& row) {
    if (row.val_psnr)
      std::printf("epoch %lld step %lld lr %.3g loss %.6f val_psnr %s\n", static_cast<long long>(row.epoch),
                  static_cast<long long>(row.step), row.lr, row.loss, format_metric(*row.val_psnr).c_str());
  };
  train_loop(*state, r.train, data, opt);
  for (const char* f : {"metrics.csv", "last.ckpt", "best.ckpt"}) {
    const auto p = fs::path(g.out) / f;
    if (fs::exists(p)) m.add_output(p.string());
  }
  if (data.val.empty())
    std::printf("finished at step %lld, no validation set\n", static_cast<long long>(state->step));
  else
    std::printf("finished at step %lld, best validation PSNR %s dB\n", static_cast<long long>(state->step),
                format_metric(state->best_val_psnr).c_str());
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string input;
  bool epsw = false;
  bool tta = false;
  bool raw = false;
  int64_t patch = 32;
  int64_t stride = 16;
  int64_t margin = 4;
  std::string window = "hann";
  std::string format = "png16";
};

int cmd_infer(const Global& g, const InferArgs& a, RunManifest& m) {
  const DType dtype = parse_dtype(g.dtype);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const GtfModel model = load_model(ck, !a.raw, dtype);
  const ModelConfig& mc = model.config();
  m.set_config(ck.header);
  const Bundle in = read_bundle(a.input);
  if (in.u != mc.angular_u || in.v != mc.angular_v)
    throw ConfigError("input bundle is " + std::to_string(in.u) + "x" + std::to_string(in.v) +
                      " views, the model expects " + std::to_string(mc.angular_u) + "x" +
                      std::to_string(mc.angular_v));
  TileSpec spec;
  spec.patch = a.patch;
  spec.stride = a.stride;
  spec.margin = a.margin;
  if (a.window == "hann")
    spec.window = BlendWindow::Hann;
  else if (a.window == "uniform")
    spec.window = BlendWindow::Uniform;
  else
    throw ConfigError("unknown blend window '" + a.window + "'");
  spec.validate();

  LumaModel luma = [&model](const Tensor& y) { return model.forward_y(y); };
  if (a.epsw) {
    luma = [inner = luma, spec, s = mc.scale](const Tensor& y) { return epsw_infer(inner, y, s, spec); };
  }
  if (a.tta) {
    if (in.u != in.v) std::fprintf(stderr, "warning: --tta on a %lldx%lld grid uses the 4 non-transposing elements\n",
                                    static_cast<long long>(in.u), static_cast<long long>(in.v));
    luma = [inner = luma, u = in.u, v = in.v](const Tensor& y) { return tta_infer(inner, LightField(y, u, v)); };
  }
  const Tensor sr = super_resolve(luma, in.tensor.to(dtype), mc.scale);
  Bundle outb{sr.to(DType::F64), in.u, in.v, in.meta};
  outb.meta["mode"] = std::string(a.epsw ? "epsw" : "single") + (a.tta ? "+tta" : "");
  write_bundle(g.out, outb, a.format);
  m.add_output((fs::path(g.out) / "manifest.txt").string());
  std::printf("wrote %lldx%lld views of %lldx%lld to %s\n", static_cast<long long>(in.u),
              static_cast<long long>(in.v), static_cast<long long>(sr.dim(3)), static_cast<long long>(sr.dim(4)),
              g.out.c_str());
  return 0;
}

int cmd_eval(const Global& g, const std::string& pred_dir, const std::string& gt_dir, RunManifest& m) {
  const Bundle pred = read_bundle(pred_dir);
  const Bundle gt = read_bundle(gt_dir);
  if (pred.u != gt.u || pred.v != gt.v || pred.tensor.shape() != gt.tensor.shape())
    throw ConfigError("prediction " + shape_str(pred.tensor.shape()) + " and ground truth " +
                      shape_str(gt.tensor.shape()) + " differ in shape");
  const MetricReport rep = evaluate_y(luminance(pred.tensor), luminance(gt.tensor));
  const std::string text = rep.to_text();
  std::fputs(text.c_str(), stdout);
  fs::create_directories(g.out);
  const auto path = fs::path(g.out) / "metrics.txt";
  std::ofstream(path) << text;
  m.add_output(path.string());
  return 0;
}

int cmd_inspect(const Global& g, const std::string& checkpoint, int64_t h, int64_t w, RunManifest& m) {
  ModelConfig mc;
  if (!checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    KeyValues kv;
    for (const auto& [k, v] : ck.header)
      if (k.rfind("model.", 0) == 0) kv[k.substr(6)] = v;
    mc = ModelConfig::from_key_values(kv);
    m.set_config(ck.header);
  } else {
    const Resolved r = resolve_config(g);
    mc = r.model;
    record_config(m, r);
  }
  const auto rows = budget_table(mc, h, w);
  std::ostringstream out;
  out << "stage,params,flops\n";
  int64_t params = 0, flops = 0;
  for (const auto& row : rows) {
    out << row.stage << "," << row.params << "," << row.flops << "\n";
    params += row.params;
    flops += row.flops;
  }
  out << "total," << params << "," << flops << "\n";
  char line[256];
  std::snprintf(line, sizeof line, "variant %s, input %lldx%lldx%lldx%lld: %.4f M params, %.3f G flops\n",
                variant_name(mc.variant), static_cast<long long>(mc.angular_u), static_cast<long long>(mc.angular_v),
                static_cast<long long>(h), static_cast<long long>(w), params / 1e6, flops / 1e9);
  out << line;
  int code = 0;
  if (mc.variant == Variant::GtfTiny) {
    const bool ok = params < kTinyParamLimit && flops < kTinyFlopLimit;
    std::snprintf(line, sizeof line,
                  "budget %s: params < 1.0M and flops < 20G; reference 0.915M / 19.8G, gap %+.1f%% / %+.1f%%\n",
                  ok ? "ok" : "VIOLATED", 100.0 * (params / kTinyPaperParams - 1.0),
                  100.0 * (flops / kTinyPaperFlops - 1.0));
    out << line;
    if (!ok) code = 1;
  }
  std::fputs(out.str().c_str(), stdout);
  fs::create_directories(g.out);
  const auto path = fs::path(g.out) / "budget.txt";
  std::ofstream(path) << out.str();
  m.add_output(path.string());
  return code;
}

int cmd_gradcheck(const Global& g, int64_t seeds, int64_t max_coords, double tolerance, RunManifest& m) {
  const std::uint64_t base = g.seed.value_or(0);
  m.set_seed(base);
  std::ostringstream out;
  bool all = true;
  for (int64_t s = 0; s < seeds; ++s) {
    for (const auto& c : gradient_suite(base + static_cast<std::uint64_t>(s), max_coords)) {
      const bool ok = c.error < tolerance;
      all = all && ok;
      char line[160];
      std::snprintf(line, sizeof line, "%s %s seed=%llu rel_err=%.3e\n", ok ? "PASS" : "FAIL", c.name.c_str(),
                    static_cast<unsigned long long>(base + s), c.error);
      out << line;
    }
  }
  out << (all ? "all gradient checks passed\n" : "gradient checks FAILED\n");
  std::fputs(out.str().c_str(), stdout);
  fs::create_directories(g.out);
  const auto path = fs::path(g.out) / "gradcheck.txt";
  std::ofstream(path) << out.str();
  m.add_output(path.string());
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Omnidirectional EPI transformer for light-field super-resolution"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--preset", g.preset, "gtf, gtf_tiny or nano")->capture_default_str();
  app.add_option("--config", g.config_file, "key=value file layered over the preset");
  app.add_option("--set", g.sets, "key=value override, repeatable");
  app.add_option("--seed", g.seed, "training and generation seed");
  app.add_option("--threads", g.threads, "worker threads (default: OMNI_EPI_THREADS or all cores)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--dtype", g.dtype, "f32 or f64")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset of paired LR/HR bundles");
  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--resume", ta.resume, "checkpoint to continue from");
  train->add_option("--data", ta.data, "dataset directory written by gen-data");
  train->add_option("--max-steps", ta.max_steps, "stop after this many steps");
  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "super-resolve a light-field bundle");
  infer->add_option("--checkpoint", ia.checkpoint)->required();
  infer->add_option("--input", ia.input, "LR bundle directory")->required();
  infer->add_flag("--epsw", ia.epsw, "overlapping tiled inference");
  infer->add_flag("--tta", ia.tta, "dihedral test-time augmentation");
  infer->add_flag("--raw-weights", ia.raw, "use raw instead of EMA weights");
  infer->add_option("--patch", ia.patch)->capture_default_str();
  infer->add_option("--stride", ia.stride)->capture_default_str();
  infer->add_option("--margin", ia.margin)->capture_default_str();
  infer->add_option("--window", ia.window, "hann or uniform")->capture_default_str();
  infer->add_option("--format", ia.format, "png8, png16, pgm8 or pgm16")->capture_default_str();
  std::string pred_dir, gt_dir;
  auto* eval = app.add_subcommand("eval", "Y-channel PSNR/SSIM of a prediction bundle");
  eval->add_option("--pred", pred_dir)->required();
  eval->add_option("--gt", gt_dir)->required();
  std::string inspect_ckpt;
  int64_t ih = 32, iw = 32;
  auto* inspect = app.add_subcommand("inspect", "parameter and FLOP budget table");
  inspect->add_option("--checkpoint", inspect_ckpt);
  inspect->add_option("--height", ih)->capture_default_str();
  inspect->add_option("--width", iw)->capture_default_str();
  int64_t gc_seeds = 1, gc_coords = 16;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every block");
  gradcheck->add_option("--seeds", gc_seeds)->capture_default_str();
  gradcheck->add_option("--max-coords", gc_coords)->capture_default_str();
  gradcheck->add_option("--tolerance", gc_tol)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  RunManifest manifest(argc, argv);
  manifest.set_out(g.out);
  int code = 3;
  try {
    int threads = 0;
    if (g.threads) {
      threads = *g.threads;
    } else if (const char* env = std::getenv("OMNI_EPI_THREADS")) {
      threads = static_cast<int>(parse_int("OMNI_EPI_THREADS", env));
    }
    if (threads < 0) throw ConfigError("thread count must be non-negative");
    if (threads > 0) set_num_threads(threads);

    if (*gen)
      code = cmd_gen_data(g, manifest);
    else if (*train)
      code = cmd_train(g, ta, manifest);
    else if (*infer)
      code = cmd_infer(g, ia, manifest);
    else if (*eval)
      code = cmd_eval(g, pred_dir, gt_dir, manifest);
    else if (*inspect)
      code = cmd_inspect(g, inspect_ckpt, ih, iw, manifest);
    else if (*gradcheck)
      code = cmd_gradcheck(g, gc_seeds, gc_coords, gc_tol, manifest);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    code = e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    code = 3;
  }
  try {
    manifest.write(code);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: cannot write run manifest: %s\n", e.what());
    if (code == 0) code = 2;
  }
  return code;
}
