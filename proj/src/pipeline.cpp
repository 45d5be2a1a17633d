// SPDX-License-Identifier: Apache-2.0
#include "moesplat/pipeline.hpp"

#include <fcntl.h>
#include <omp.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "moesplat/io.hpp"
#include "moesplat/metrics.hpp"

namespace moesplat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config parsing helpers. Every object is checked against its allowed keys so
// a misspelled field fails loudly instead of silently keeping a default.

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <typename Fn>
auto wrap_enum(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

PrunePolicy::Mode prune_mode_from_string(const std::string& s) {
  if (s == "ratio") return PrunePolicy::Mode::kRatio;
  if (s == "threshold") return PrunePolicy::Mode::kThreshold;
  throw ConfigError("prune.mode: expected 'ratio' or 'threshold', got '" + s + "'");
}

std::string to_string(PrunePolicy::Mode m) { return m == PrunePolicy::Mode::kRatio ? "ratio" : "threshold"; }

SceneSpec scene_preset(const std::string& name) {
  if (name == "two_regime") return SceneSpec::two_regime();
  if (name == "micro") return SceneSpec::micro();
  throw ConfigError("scene.preset: expected 'two_regime' or 'micro', got '" + name + "'");
}

void parse_scene(const json& j, RunConfig& cfg) {
  check_keys(j, {"preset", "resolution", "focal", "camera_count", "camera_distance", "arc_degrees", "train_views",
                 "test_views"},
             "scene");
  read_field(j, "preset", cfg.scene_preset, "scene");
  cfg.scene = scene_preset(cfg.scene_preset);
  if (j.contains("resolution")) {
    std::vector<int> hw;
    read_field(j, "resolution", hw, "scene");
    if (hw.size() != 2) throw ConfigError("scene.resolution: expected [height, width]");
    cfg.scene.resolution = {hw[0], hw[1]};
  }
  read_field(j, "focal", cfg.scene.focal, "scene");
  read_field(j, "camera_count", cfg.scene.camera_count, "scene");
  read_field(j, "camera_distance", cfg.scene.camera_distance, "scene");
  read_field(j, "arc_degrees", cfg.scene.arc_degrees, "scene");
  read_field(j, "train_views", cfg.scene.train_views, "scene");
  read_field(j, "test_views", cfg.scene.test_views, "scene");
}

void parse_optim(const json& j, OptimConfig& o) {
  check_keys(j, {"stage1_steps", "stage2_steps", "distill_steps", "batch_views", "expert_lr", "router_lr", "radam"},
             "optim");
  read_field(j, "stage1_steps", o.stage1_steps, "optim");
  read_field(j, "stage2_steps", o.stage2_steps, "optim");
  read_field(j, "distill_steps", o.distill_steps, "optim");
  read_field(j, "batch_views", o.batch_views, "optim");
  if (j.contains("expert_lr")) {
    const json& e = j.at("expert_lr");
    check_keys(e, {"color", "opacity", "motion"}, "optim.expert_lr");
    read_field(e, "color", o.expert.color, "optim.expert_lr");
    read_field(e, "opacity", o.expert.opacity, "optim.expert_lr");
    read_field(e, "motion", o.expert.motion, "optim.expert_lr");
  }
  if (j.contains("router_lr")) {
    const json& r = j.at("router_lr");
    check_keys(r, {"w", "w_dir", "w_time", "phi", "pixel_net", "gate_logits"}, "optim.router_lr");
    read_field(r, "w", o.router.w, "optim.router_lr");
    read_field(r, "w_dir", o.router.w_dir, "optim.router_lr");
    read_field(r, "w_time", o.router.w_time, "optim.router_lr");
    read_field(r, "phi", o.router.phi, "optim.router_lr");
    read_field(r, "pixel_net", o.router.pixel_net, "optim.router_lr");
    read_field(r, "gate_logits", o.router.gate_logits, "optim.router_lr");
  }
  if (j.contains("radam")) {
    const json& r = j.at("radam");
    check_keys(r, {"beta1", "beta2", "eps", "rho_threshold"}, "optim.radam");
    read_field(r, "beta1", o.radam.beta1, "optim.radam");
    read_field(r, "beta2", o.radam.beta2, "optim.radam");
    read_field(r, "eps", o.radam.eps, "optim.radam");
    read_field(r, "rho_threshold", o.radam.rho_threshold, "optim.radam");
  }
}

std::string csv_double(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string view_name(int v) {
  std::ostringstream s;
  s << "view_" << std::setw(3) << std::setfill('0') << v;
  return s.str();
}

fs::path checkpoint_dir(const RunConfig& cfg) {
  return cfg.checkpoint ? *cfg.checkpoint : cfg.output_dir / "checkpoint";
}

MoeModel load_checkpoint(const RunConfig& cfg) {
  const fs::path dir = checkpoint_dir(cfg);
  if (!fs::exists(dir / "checkpoint.json")) throw IoError("missing checkpoint: " + dir.string());
  return read_moe(dir);
}

void require_finite(const ImageBuffer& img, const std::string& what) {
  if (!img.all_finite()) throw NumericalError("non-finite values in " + what);
}

/// Writes config.json, builds and re-verifies the manifest, and checks that
/// every declared output exists.
void finish(const RunConfig& cfg, const std::string& command, const std::vector<fs::path>& declared) {
  const fs::path& dir = cfg.output_dir;
  write_text(dir / "config.json", config_to_json(cfg));
  for (const fs::path& p : declared) {
    if (!fs::exists(dir / p)) throw IoError("declared output was not written: " + (dir / p).string());
  }
  const Manifest m = Manifest::build(dir, command, cfg.seed);
  write_text(dir / "manifest.json", m.to_json());
  const Manifest back = Manifest::from_json(read_text(dir / "manifest.json"));
  if (!back.verify(dir)) throw IoError("manifest verification failed in " + dir.string());
  std::cout << m.to_json();
}

std::string eval_csv(const EvalResult& r) {
  std::ostringstream s;
  s << "view,time,psnr,ssim\n";
  for (const EvalRow& row : r.rows) {
    s << row.view << ',' << csv_double(row.time) << ',' << csv_double(row.psnr) << ',' << csv_double(row.ssim)
      << '\n';
  }
  s << "mean,," << csv_double(r.mean_psnr) << ',' << csv_double(r.mean_ssim) << '\n';
  return s.str();
}

std::size_t model_bytes(const MoeModel& m) {
  std::size_t n = m.router.parameter_bytes().size();
  for (const ExpertModel& e : m.experts) n += e.parameter_bytes().size();
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  try {
    scene.validate();
    optim.validate();
    loss.validate();
    distill.config.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (experts.empty()) throw ConfigError("experts: at least one expert is required");
  if (init.overparameterization < 1.0) throw ConfigError("init.overparameterization must be >= 1");
  if (init.position_noise < 0.0 || init.scale_jitter < 0.0) throw ConfigError("init noise must be >= 0");
  if (distill.student_expert < 0 || distill.student_expert >= static_cast<int>(experts.size())) {
    throw ConfigError("distill.student_expert out of range");
  }
  if (prune.mode == PrunePolicy::Mode::kRatio && (prune.value < 0.0 || prune.value >= 1.0)) {
    throw ConfigError("prune.value must lie in [0, 1) for ratio mode");
  }
  if (prune.mode == PrunePolicy::Mode::kThreshold && prune.value < 0.0) {
    throw ConfigError("prune.value must be >= 0 for threshold mode");
  }
  if (prune.rounds < 1) throw ConfigError("prune.rounds must be >= 1");
  if (prune.finetune_steps < 0) throw ConfigError("prune.finetune_steps must be >= 0");
  if (prune.random && prune.mode != PrunePolicy::Mode::kRatio) {
    throw ConfigError("prune.random requires ratio mode");
  }
  for (int v : render.views) {
    if (v < 0) throw ConfigError("render.views: negative view index");
  }
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"schema_version", "seed", "output_dir", "scene", "dataset", "experts", "init", "router", "optim",
                 "loss", "distill", "prune", "render", "checkpoint", "log_every"},
             "config");
  if (!j.contains("schema_version")) throw ConfigError("config: schema_version is required");
  int version = 0;
  read_field(j, "schema_version", version, "config");
  if (version != kConfigSchemaVersion) {
    throw ConfigError("config: unsupported schema_version " + std::to_string(version));
  }
  RunConfig cfg;
  read_field(j, "seed", cfg.seed, "config");
  if (j.contains("output_dir")) {
    std::string out;
    read_field(j, "output_dir", out, "config");
    cfg.output_dir = out;
  }
  if (j.contains("scene")) parse_scene(j.at("scene"), cfg);
  if (j.contains("dataset")) {
    std::string d;
    read_field(j, "dataset", d, "config");
    cfg.dataset = d;
  }
  if (j.contains("experts")) {
    if (!j.at("experts").is_array()) throw ConfigError("experts: expected an array");
    cfg.experts.clear();
    for (const json& e : j.at("experts")) {
      check_keys(e, {"kind"}, "experts[]");
      std::string kind;
      read_field(e, "kind", kind, "experts[]");
      cfg.experts.push_back({wrap_enum("experts[].kind", [&] { return expert_kind_from_string(kind); })});
    }
  }
  if (j.contains("init")) {
    const json& i = j.at("init");
    check_keys(i, {"overparameterization", "position_noise", "scale_jitter"}, "init");
    read_field(i, "overparameterization", cfg.init.overparameterization, "init");
    read_field(i, "position_noise", cfg.init.position_noise, "init");
    read_field(i, "scale_jitter", cfg.init.scale_jitter, "init");
  }
  if (j.contains("router")) {
    std::string r;
    read_field(j, "router", r, "config");
    cfg.router = wrap_enum("router", [&] { return router_kind_from_string(r); });
  }
  if (j.contains("optim")) parse_optim(j.at("optim"), cfg.optim);
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, {"lambda_ssim", "ssim_window", "ssim_sigma"}, "loss");
    read_field(l, "lambda_ssim", cfg.loss.lambda_ssim, "loss");
    read_field(l, "ssim_window", cfg.loss.ssim.window, "loss");
    read_field(l, "ssim_sigma", cfg.loss.ssim.sigma, "loss");
  }
  if (j.contains("distill")) {
    const json& d = j.at("distill");
    check_keys(d, {"lambda", "student_expert", "compare_gt_only"}, "distill");
    read_field(d, "lambda", cfg.distill.config.lambda, "distill");
    read_field(d, "student_expert", cfg.distill.student_expert, "distill");
    read_field(d, "compare_gt_only", cfg.distill.compare_gt_only, "distill");
  }
  if (j.contains("prune")) {
    const json& p = j.at("prune");
    check_keys(p, {"mode", "value", "rounds", "finetune_steps", "reduction", "random"}, "prune");
    if (p.contains("mode")) {
      std::string m;
      read_field(p, "mode", m, "prune");
      cfg.prune.mode = prune_mode_from_string(m);
    }
    read_field(p, "value", cfg.prune.value, "prune");
    read_field(p, "rounds", cfg.prune.rounds, "prune");
    read_field(p, "finetune_steps", cfg.prune.finetune_steps, "prune");
    if (p.contains("reduction")) {
      std::string r;
      read_field(p, "reduction", r, "prune");
      cfg.prune.reduction = wrap_enum("prune.reduction", [&] { return importance_reduction_from_string(r); });
    }
    read_field(p, "random", cfg.prune.random, "prune");
  }
  if (j.contains("render")) {
    const json& r = j.at("render");
    check_keys(r, {"views", "single_pass", "independent_transmittance"}, "render");
    read_field(r, "views", cfg.render.views, "render");
    read_field(r, "single_pass", cfg.render.single_pass, "render");
    read_field(r, "independent_transmittance", cfg.render.independent_transmittance, "render");
  }
  if (j.contains("checkpoint")) {
    std::string c;
    read_field(j, "checkpoint", c, "config");
    cfg.checkpoint = c;
  }
  read_field(j, "log_every", cfg.log_every, "config");
  cfg.optim.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

std::string config_to_json(const RunConfig& cfg) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir.generic_string();
  j["scene"] = {{"preset", cfg.scene_preset},
                {"resolution", {cfg.scene.resolution.height, cfg.scene.resolution.width}},
                {"focal", cfg.scene.focal},
                {"camera_count", cfg.scene.camera_count},
                {"camera_distance", cfg.scene.camera_distance},
                {"arc_degrees", cfg.scene.arc_degrees},
                {"train_views", cfg.scene.train_views},
                {"test_views", cfg.scene.test_views}};
  if (cfg.dataset) j["dataset"] = cfg.dataset->generic_string();
  j["experts"] = json::array();
  for (const ExpertSpec& e : cfg.experts) j["experts"].push_back({{"kind", to_string(e.kind)}});
  j["init"] = {{"overparameterization", cfg.init.overparameterization},
               {"position_noise", cfg.init.position_noise},
               {"scale_jitter", cfg.init.scale_jitter}};
  j["router"] = to_string(cfg.router);
  const OptimConfig& o = cfg.optim;
  j["optim"] = {{"stage1_steps", o.stage1_steps},
                {"stage2_steps", o.stage2_steps},
                {"distill_steps", o.distill_steps},
                {"batch_views", o.batch_views},
                {"expert_lr", {{"color", o.expert.color}, {"opacity", o.expert.opacity}, {"motion", o.expert.motion}}},
                {"router_lr",
                 {{"w", o.router.w},
                  {"w_dir", o.router.w_dir},
                  {"w_time", o.router.w_time},
                  {"phi", o.router.phi},
                  {"pixel_net", o.router.pixel_net},
                  {"gate_logits", o.router.gate_logits}}},
                {"radam",
                 {{"beta1", o.radam.beta1},
                  {"beta2", o.radam.beta2},
                  {"eps", o.radam.eps},
                  {"rho_threshold", o.radam.rho_threshold}}}};
  j["loss"] = {{"lambda_ssim", cfg.loss.lambda_ssim},
               {"ssim_window", cfg.loss.ssim.window},
               {"ssim_sigma", cfg.loss.ssim.sigma}};
  j["distill"] = {{"lambda", cfg.distill.config.lambda},
                  {"student_expert", cfg.distill.student_expert},
                  {"compare_gt_only", cfg.distill.compare_gt_only}};
  j["prune"] = {{"mode", to_string(cfg.prune.mode)},
                {"value", cfg.prune.value},
                {"rounds", cfg.prune.rounds},
                {"finetune_steps", cfg.prune.finetune_steps},
                {"reduction", to_string(cfg.prune.reduction)},
                {"random", cfg.prune.random}};
  j["render"] = {{"views", cfg.render.views},
                 {"single_pass", cfg.render.single_pass},
                 {"independent_transmittance", cfg.render.independent_transmittance}};
  if (cfg.checkpoint) j["checkpoint"] = cfg.checkpoint->generic_string();
  j["log_every"] = cfg.log_every;
  return j.dump(2) + "\n";
}

void apply_flags(RunConfig& cfg, const CommandFlags& flags) {
  if (flags.seed) {
    cfg.seed = *flags.seed;
    cfg.optim.seed = *flags.seed;
  }
  if (flags.out) cfg.output_dir = *flags.out;
  if (flags.single_pass) cfg.render.single_pass = true;
  cfg.validate();
}

SynthScene load_or_synthesize(const RunConfig& cfg) {
  if (cfg.dataset) {
    if (!fs::exists(*cfg.dataset / "dataset.json")) throw IoError("missing dataset: " + cfg.dataset->string());
    return read_scene(*cfg.dataset);
  }
  return synth_scene(cfg.seed, cfg.scene);
}

std::vector<ExpertModel> initial_experts(const RunConfig& cfg, const SynthScene& scene) {
  std::vector<ExpertModel> experts;
  for (std::size_t k = 0; k < cfg.experts.size(); ++k) {
    experts.push_back(init_expert(cfg.experts[k].kind, scene, cfg.seed * 10 + k + 1, cfg.init));
  }
  return experts;
}

MoeModel train_moe(const RunConfig& cfg, const SynthScene& scene, TrainLog* log) {
  std::vector<ExpertModel> experts = initial_experts(cfg, scene);
  train_stage1(experts, scene.dataset, cfg.optim, cfg.loss, log);
  MoeModel model;
  model.experts = std::move(experts);
  model.router = RouterState::create(cfg.router, model.gaussian_counts(), cfg.seed);
  train_stage2(model, scene.dataset, cfg.optim, cfg.loss, cfg.optim.stage2_steps, log);
  return model;
}

MoePass render_moe_single_pass(const MoeModel& model, const View& view, const SinglePassOptions& options,
                               RenderCounters* counters) {
  if (model.router.kind == RouterKind::kVolume) {
    // Per-Gaussian gates change each expert's own opacities, so the expert
    // images are not composites of one shared splat list.
    const std::vector<ExpertRender> renders = render_experts(model.experts, view);
    if (counters) {
      const auto k = static_cast<std::uint64_t>(model.experts.size());
      counters->projection_passes += 2 * k;
      counters->sort_passes += 2 * k;
      counters->composite_passes += 2 * k;
    }
    return router_forward(model.router, model.experts, renders, view);
  }
  const int k = static_cast<int>(model.experts.size());
  MergedBatch batch = MergedBatch::build(model.experts, view, counters);
  const bool volume_aware = model.router.kind == RouterKind::kVolumeAware;
  if (volume_aware) {
    std::vector<std::vector<double>> values(k);
    for (int e = 0; e < k; ++e) {
      const ExpertWeights& w = model.router.weights.experts[e];
      values[e].resize(3 * static_cast<std::size_t>(w.size()));
      for (int i = 0; i < w.size(); ++i) {
        values[e][3 * i] = w.w[i];
        values[e][3 * i + 1] = w.w_dir[i];
        values[e][3 * i + 2] = view.time * w.w_time[i];
      }
    }
    batch.append_channels(values, 3);
  }
  std::vector<ImageBuffer> composites = render_single_pass(batch, options, counters);
  const Resolution res = view.camera.resolution;
  std::vector<ImageBuffer> images;
  std::vector<ImageBuffer> planes;
  for (const ImageBuffer& c : composites) {
    ImageBuffer rgb(res, 3), w(res, 3);
    if (c.channels() >= 3) {
      for (int ch = 0; ch < 3; ++ch) rgb.set_plane(ch, c.plane(ch));
    }
    if (volume_aware && c.channels() == 6) {
      for (int ch = 0; ch < 3; ++ch) w.set_plane(ch, c.plane(3 + ch));
    }
    images.push_back(std::move(rgb));
    planes.push_back(std::move(w));
  }
  MoePass pass;
  pass.kind = model.router.kind;
  pass.time = view.time;
  pass.gating = volume_aware ? route_volume_aware(planes, view, model.router.phi, &pass.volume_aware)
                             : route_pixel_baseline(view, model.router.pixel_net, &pass.pixel);
  pass.blended = blend(pass.gating, images);
  pass.valid = true;
  return pass;
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw IoError("output directory is locked by another run: " + path_.string());
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const RunConfig& cfg) {
  OutputLock lock(cfg.output_dir);
  const SynthScene scene = synth_scene(cfg.seed, cfg.scene);
  write_scene(cfg.output_dir / "dataset", scene);
  // Read back and re-render the stored ground truth to validate the files.
  const SynthScene back = read_scene(cfg.output_dir / "dataset");
  for (std::size_t v = 0; v < back.dataset.views.size(); ++v) {
    const View& view = back.dataset.views[v];
    const ImageBuffer img = back.truth.render(view.camera, view.time);
    if (img.max_abs_diff(*view.ground_truth) > 1e-6) {
      throw IoError("stored ground truth does not reproduce view " + std::to_string(v));
    }
  }
  finish(cfg, "synth", {"dataset/dataset.json"});
}

void cmd_train(const RunConfig& cfg) {
  OutputLock lock(cfg.output_dir);
  const SynthScene scene = load_or_synthesize(cfg);
  TrainLog log;
  log.every = cfg.log_every;
  const MoeModel model = train_moe(cfg, scene, &log);
  write_moe(cfg.output_dir / "checkpoint", model);
  write_text(cfg.output_dir / "train_log.csv", log.to_csv());
  read_moe(cfg.output_dir / "checkpoint");
  finish(cfg, "train", {"checkpoint/checkpoint.json", "train_log.csv"});
}

void cmd_render(const RunConfig& cfg, bool stats) {
  OutputLock lock(cfg.output_dir);
  const MoeModel model = load_checkpoint(cfg);
  const SynthScene scene = load_or_synthesize(cfg);
  const Dataset& d = scene.dataset;
  std::vector<int> views = cfg.render.views.empty() ? d.test_indices() : cfg.render.views;
  for (int v : views) {
    if (v >= static_cast<int>(d.views.size())) throw IoError("render.views: view " + std::to_string(v) + " missing");
  }
  const int k = static_cast<int>(model.experts.size());
  RenderCounters counters;
  double max_diff = 0.0;
  std::vector<fs::path> declared;
  const fs::path out = cfg.output_dir / "render";
  for (int v : views) {
    const View& view = d.views[v];
    MoePass pass;
    if (cfg.render.single_pass) {
      SinglePassOptions opts;
      opts.independent_transmittance = cfg.render.independent_transmittance;
      pass = render_moe_single_pass(model, view, opts, &counters);
      if (stats) max_diff = std::max(max_diff, pass.blended.max_abs_diff(render_moe(model, view).blended));
    } else {
      pass = render_moe(model, view);
      const auto kk = static_cast<std::uint64_t>(k);
      const std::uint64_t per = model.router.kind == RouterKind::kPixel ? 1 : 2;
      counters.projection_passes += per * kk;
      counters.sort_passes += per * kk;
      counters.composite_passes += per * kk;
    }
    require_finite(pass.blended, "render of view " + std::to_string(v));
    const std::string name = view_name(v);
    write_f32(out / (name + ".f32"), pass.blended);
    write_png(out / (name + ".png"), pass.blended);
    declared.push_back(fs::path("render") / (name + ".f32"));
    if (!pass.gating.gates.empty()) {
      write_f32(out / (name + "_gates.f32"), pass.gating.gates);
      for (int e = 0; e < k; ++e) write_png(out / (name + "_gate" + std::to_string(e) + ".png"), pass.gating.gates.plane(e));
    }
  }
  if (stats) {
    json s;
    s["views"] = views.size();
    s["single_pass"] = cfg.render.single_pass;
    s["independent_transmittance"] = cfg.render.independent_transmittance;
    s["projection_passes"] = counters.projection_passes;
    s["sort_passes"] = counters.sort_passes;
    s["composite_passes"] = counters.composite_passes;
    s["splats_projected"] = counters.splats_projected;
    if (cfg.render.single_pass) s["max_abs_diff_vs_multi_pass"] = max_diff;
    write_text(cfg.output_dir / "stats.json", s.dump(2) + "\n");
    std::cerr << s.dump(2) << "\n";
    declared.emplace_back("stats.json");
  }
  finish(cfg, "render", declared);
}

void cmd_prune(const RunConfig& cfg) {
  OutputLock lock(cfg.output_dir);
  MoeModel model = load_checkpoint(cfg);
  const SynthScene scene = load_or_synthesize(cfg);
  const EvalResult before = evaluate_moe(model, scene.dataset, Split::kTest);
  std::vector<PruneReport> reports;
  if (cfg.prune.mode == PrunePolicy::Mode::kRatio) {
    ProgressivePruneConfig pc;
    pc.ratio = cfg.prune.value;
    pc.rounds = cfg.prune.rounds;
    pc.finetune_steps = cfg.prune.finetune_steps;
    pc.reduction = cfg.prune.reduction;
    pc.random = cfg.prune.random;
    pc.random_seed = cfg.seed;
    reports = progressive_prune(model, scene.dataset, pc, cfg.optim, cfg.loss);
  } else {
    const ImportanceTable table = importance_scores(model, scene.dataset, cfg.prune.reduction);
    reports.push_back(prune(model, table, PrunePolicy::threshold(cfg.prune.value)));
  }
  const EvalResult after = evaluate_moe(model, scene.dataset, Split::kTest);
  write_moe(cfg.output_dir / "checkpoint", model);
  std::ostringstream csv;
  csv << "round,expert,kept,removed,cutoff,p25,p50,p75,bytes_before,bytes_after\n";
  for (std::size_t r = 0; r < reports.size(); ++r) {
    for (const PruneReport::Row& row : reports[r].rows) {
      csv << r + 1 << ',' << row.expert << ',' << row.kept << ',' << row.removed << ',' << csv_double(row.cutoff)
          << ',' << csv_double(row.p25) << ',' << csv_double(row.p50) << ',' << csv_double(row.p75) << ','
          << reports[r].bytes_before << ',' << reports[r].bytes_after << '\n';
    }
  }
  write_text(cfg.output_dir / "prune_report.csv", csv.str());
  std::ostringstream ev;
  ev << "model,test_psnr,test_ssim\n"
     << "before," << csv_double(before.mean_psnr) << ',' << csv_double(before.mean_ssim) << '\n'
     << "after," << csv_double(after.mean_psnr) << ',' << csv_double(after.mean_ssim) << '\n';
  write_text(cfg.output_dir / "prune_eval.csv", ev.str());
  finish(cfg, "prune", {"checkpoint/checkpoint.json", "prune_report.csv", "prune_eval.csv"});
}

void cmd_distill(const RunConfig& cfg) {
  OutputLock lock(cfg.output_dir);
  const MoeModel teacher = load_checkpoint(cfg);
  const SynthScene scene = load_or_synthesize(cfg);
  const int s = cfg.distill.student_expert;
  if (s >= static_cast<int>(teacher.experts.size())) throw InvalidInput("distill.student_expert not in checkpoint");
  const ExpertKind kind = teacher.experts[s].kind();
  const std::uint64_t init_seed = cfg.seed * 10 + static_cast<std::uint64_t>(s) + 1;
  const TeacherCache cache = build_teacher_cache(teacher, s, scene.dataset);
  TrainLog log;
  log.every = cfg.log_every;
  ExpertModel student = init_expert(kind, scene, init_seed, cfg.init);
  distill(student, cache, scene.dataset, cfg.distill.config, cfg.optim, cfg.loss, &log);
  write_expert(cfg.output_dir / "student.msx", student);

  std::ostringstream csv;
  csv << "model,kind,lambda,test_psnr,test_ssim\n";
  auto row = [&](const std::string& name, const EvalResult& r, const std::string& lambda) {
    csv << name << ',' << to_string(kind) << ',' << lambda << ',' << csv_double(r.mean_psnr) << ','
        << csv_double(r.mean_ssim) << '\n';
  };
  row("teacher_moe", evaluate_moe(teacher, scene.dataset, Split::kTest), "");
  row("teacher_expert", evaluate_expert(teacher.experts[s], scene.dataset, Split::kTest), "");
  row("distilled", evaluate_expert(student, scene.dataset, Split::kTest), csv_double(cfg.distill.config.lambda));
  std::vector<fs::path> declared{"student.msx", "distill_report.csv", "distill_log.csv"};
  if (cfg.distill.compare_gt_only) {
    ExpertModel gt_only = init_expert(kind, scene, init_seed, cfg.init);
    train_expert(gt_only, scene.dataset, cfg.optim, cfg.loss, cfg.optim.distill_steps, "gt_only", &log);
    write_expert(cfg.output_dir / "gt_only.msx", gt_only);
    row("gt_only", evaluate_expert(gt_only, scene.dataset, Split::kTest), "");
    declared.emplace_back("gt_only.msx");
  }
  write_text(cfg.output_dir / "distill_report.csv", csv.str());
  write_text(cfg.output_dir / "distill_log.csv", log.to_csv());
  finish(cfg, "distill", declared);
}

void cmd_eval(const RunConfig& cfg) {
  OutputLock lock(cfg.output_dir);
  const MoeModel model = load_checkpoint(cfg);
  const SynthScene scene = load_or_synthesize(cfg);
  const Dataset& d = scene.dataset;
  const EvalResult result = evaluate_moe(model, d, Split::kTest);
  if (!std::isfinite(result.mean_psnr)) throw NumericalError("non-finite PSNR");
  write_text(cfg.output_dir / "metrics.csv", eval_csv(result));

  // Specialization over the stacked test views: one tall image per quantity,
  // so the per-expert means are exact aggregates rather than means of means.
  std::ostringstream ranks;
  ranks << "expert,kind,magnitude,weighted_mean,normalized\n";
  if (model.router.kind != RouterKind::kVolume) {
    const std::vector<int> test = d.test_indices();
    const Resolution res = d.resolution();
    const int k = static_cast<int>(model.experts.size());
    const int rows = res.height * static_cast<int>(test.size());
    ImageBuffer gates(rows, res.width, k), motion(rows, res.width, 1), detail(rows, res.width, 1);
    for (std::size_t n = 0; n < test.size(); ++n) {
      const int v = test[n];
      const MoePass pass = render_moe(model, d.views[v]);
      const ImageBuffer m = motion_magnitude(d, v);
      const ImageBuffer c = detail_complexity(*d.views[v].ground_truth);
      for (int y = 0; y < res.height; ++y) {
        for (int x = 0; x < res.width; ++x) {
          const int yy = static_cast<int>(n) * res.height + y;
          for (int e = 0; e < k; ++e) gates.at(yy, x, e) = pass.gating.gates.at(y, x, e);
          motion.at(yy, x, 0) = m.at(y, x, 0);
          detail.at(yy, x, 0) = c.at(y, x, 0);
        }
      }
    }
    for (const auto& [name, mag] : {std::pair{"motion", &motion}, std::pair{"detail", &detail}}) {
      const SpecializationRecord rec = specialization(gates, *mag);
      for (int e = 0; e < k; ++e) {
        ranks << e << ',' << to_string(model.experts[e].kind()) << ',' << name << ','
             << csv_double(rec.weighted_mean[e]) << ',' << csv_double(rec.normalized[e]) << '\n';
      }
    }
  }
  write_text(cfg.output_dir / "specialization.csv", ranks.str());
  finish(cfg, "eval", {"metrics.csv", "specialization.csv"});
}

void cmd_ablate(const RunConfig& cfg) {
  OutputLock lock(cfg.output_dir);
  const SynthScene scene = load_or_synthesize(cfg);
  const Dataset& d = scene.dataset;
  std::vector<ExpertModel> experts = initial_experts(cfg, scene);
  train_stage1(experts, d, cfg.optim, cfg.loss);

  std::ostringstream csv;
  csv << "model,router,test_psnr,test_ssim,parameter_bytes\n";
  std::size_t expert_bytes = 0;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    const EvalResult r = evaluate_expert(experts[k], d, Split::kTest);
    const std::size_t b = experts[k].parameter_bytes().size();
    expert_bytes += b;
    csv << "expert" << k << ':' << to_string(experts[k].kind()) << ",none," << csv_double(r.mean_psnr) << ','
        << csv_double(r.mean_ssim) << ',' << b << '\n';
  }
  const EvalResult uni = evaluate_uniform(experts, d, Split::kTest);
  csv << "uniform,none," << csv_double(uni.mean_psnr) << ',' << csv_double(uni.mean_ssim) << ',' << expert_bytes
      << '\n';
  for (RouterKind kind : {RouterKind::kVolumeAware, RouterKind::kPixel, RouterKind::kVolume}) {
    MoeModel model;
    model.experts = experts;
    model.router = RouterState::create(kind, model.gaussian_counts(), cfg.seed);
    train_stage2(model, d, cfg.optim, cfg.loss, cfg.optim.stage2_steps);
    const EvalResult r = evaluate_moe(model, d, Split::kTest);
    if (!std::isfinite(r.mean_psnr)) throw NumericalError("non-finite PSNR for router " + to_string(kind));
    csv << "moe," << to_string(kind) << ',' << csv_double(r.mean_psnr) << ',' << csv_double(r.mean_ssim) << ','
        << model_bytes(model) << '\n';
  }
  write_text(cfg.output_dir / "ablation.csv", csv.str());
  finish(cfg, "ablate", {"ablation.csv"});
}

int run_command(const std::string& command, const fs::path& config_path, const CommandFlags& flags) {
  if (const char* threads = std::getenv("MOESPLAT_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(threads, &end, 10);
    if (end == threads || *end != '\0' || n < 1) {
      std::cerr << "moesplat: MOESPLAT_THREADS must be a positive integer\n";
      return kExitConfig;
    }
    omp_set_num_threads(static_cast<int>(n));
  }
  try {
    RunConfig cfg = load_config(config_path);
    apply_flags(cfg, flags);
    if (command == "synth") cmd_synth(cfg);
    else if (command == "train") cmd_train(cfg);
    else if (command == "render") cmd_render(cfg, flags.stats);
    else if (command == "prune") cmd_prune(cfg);
    else if (command == "distill") cmd_distill(cfg);
    else if (command == "eval") cmd_eval(cfg);
    else if (command == "ablate") cmd_ablate(cfg);
    else throw ConfigError("unknown command '" + command + "'");
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "moesplat: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidParameter& e) {
    std::cerr << "moesplat: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "moesplat: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "moesplat: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "moesplat: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "moesplat: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace moesplat
