// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the command implementations behind the CLI.
//
// A run is described by one JSON document (schema_version 1). Unknown keys
// are rejected and every value is validated before any compute starts. Each
// command writes into its output directory under an exclusive lock file,
// echoes the effective configuration as config.json and finishes with a
// manifest.json listing the SHA-256 of every artifact.
//
// CSV headers:
//   train_log.csv       step,stage,label,loss,psnr
//   metrics.csv         view,time,psnr,ssim      (last row: mean)
//   specialization.csv  expert,kind,magnitude,weighted_mean,normalized
//   prune_report.csv    round,expert,kept,removed,cutoff,p25,p50,p75,bytes_before,bytes_after
//   prune_eval.csv      model,test_psnr,test_ssim   (before, after)
//   distill_report.csv  model,kind,lambda,test_psnr,test_ssim
//   ablation.csv        model,router,test_psnr,test_ssim,parameter_bytes
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "moesplat/errors.hpp"
#include "moesplat/experts.hpp"
#include "moesplat/fused.hpp"
#include "moesplat/router.hpp"
#include "moesplat/synth.hpp"
#include "moesplat/training.hpp"

namespace moesplat {

/// The configuration document is malformed or out of range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kConfigSchemaVersion = 1;

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

struct ExpertSpec {
  ExpertKind kind = ExpertKind::kPolynomial;
};

struct PruneSettings {
  PrunePolicy::Mode mode = PrunePolicy::Mode::kRatio;
  double value = 0.4;
  int rounds = 2;
  int finetune_steps = 200;
  ImportanceReduction reduction = ImportanceReduction::kSum;
  bool random = false;
};

struct RenderSettings {
  /// View indices to render; empty means every test view.
  std::vector<int> views;
  bool single_pass = false;
  bool independent_transmittance = true;
};

struct DistillSettings {
  DistillConfig config;
  /// Which expert of the teacher the student replaces.
  int student_expert = 0;
  /// Also train a ground-truth-only expert of the same kind for comparison.
  bool compare_gt_only = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  /// Scene preset ("two_regime" or "micro") with optional overrides.
  SceneSpec scene = SceneSpec::two_regime();
  std::string scene_preset = "two_regime";
  /// When set, the dataset is read from this directory instead of synthesized.
  std::optional<std::filesystem::path> dataset;
  std::vector<ExpertSpec> experts{{ExpertKind::kPolynomial}, {ExpertKind::kKeyframe}};
  ExpertInit init;
  RouterKind router = RouterKind::kVolumeAware;
  OptimConfig optim;
  LossConfig loss;
  DistillSettings distill;
  PruneSettings prune;
  RenderSettings render;
  /// Checkpoint directory read by render, prune, distill and eval.
  std::optional<std::filesystem::path> checkpoint;
  int log_every = 10;

  void validate() const;
};

/// Parses and validates a configuration document. Relative paths are kept
/// as written. Throws ConfigError.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
/// The effective configuration as a JSON document that parse_config accepts.
std::string config_to_json(const RunConfig& cfg);

struct CommandFlags {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  bool single_pass = false;
  bool stats = false;
};

/// Applies CLI overrides on top of the file values.
void apply_flags(RunConfig& cfg, const CommandFlags& flags);

/// The scene a run works on: read from `cfg.dataset` or synthesized from
/// (seed, scene spec).
SynthScene load_or_synthesize(const RunConfig& cfg);

/// Expert k starts from init_expert with seed 10 * seed + k + 1.
std::vector<ExpertModel> initial_experts(const RunConfig& cfg, const SynthScene& scene);

/// Stage 1 followed by Stage 2 with the configured router.
MoeModel train_moe(const RunConfig& cfg, const SynthScene& scene, TrainLog* log = nullptr);

/// Renders one view of a mixture through a single merged pass. The volume-aware
/// router planes travel as extra channels of the same composite; the pixel
/// router needs none. The volume baseline has no per-expert composite to fuse
/// and is rendered multi-pass.
MoePass render_moe_single_pass(const MoeModel& model, const View& view,
                               const SinglePassOptions& options, RenderCounters* counters);

/// Exclusive per-directory lock held for one command's lifetime.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

void cmd_synth(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_render(const RunConfig& cfg, bool stats);
void cmd_prune(const RunConfig& cfg);
void cmd_distill(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_ablate(const RunConfig& cfg);

/// Loads the config, applies flags, dispatches and maps exceptions to exit
/// codes. Diagnostics go to stderr.
int run_command(const std::string& command, const std::filesystem::path& config_path,
                const CommandFlags& flags);

}  // namespace moesplat
