// SPDX-License-Identifier: Apache-2.0
//
// Two-stage optimization, distillation and progressive pruning.
//
// Stage 1 fits every expert on its own against the ground truth and then
// freezes it. Stage 2 trains only the router on top of the frozen experts.
// Distillation retrains one expert from scratch against the ground truth where
// the teacher's gate trusts that expert and against the teacher's blended
// render everywhere else.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moesplat/experts.hpp"
#include "moesplat/fused.hpp"
#include "moesplat/image.hpp"
#include "moesplat/metrics.hpp"
#include "moesplat/optim.hpp"
#include "moesplat/router.hpp"
#include "moesplat/scene.hpp"

namespace moesplat {

struct LossConfig {
  double lambda_ssim = 0.2;
  SsimConfig ssim;

  void validate() const;
};

struct LossResult {
  double value = 0.0;
  ImageBuffer grad;  // d value / d image
};

/// (1 - lambda) * L1 + lambda * (1 - SSIM), with L1 the mean absolute error
/// over every pixel and channel. Throws InvalidInput on a shape mismatch.
LossResult loss(const ImageBuffer& image, const ImageBuffer& reference, const LossConfig& cfg);

struct ExpertLearningRates {
  double color = 0.02;
  double opacity = 0.02;
  double motion = 1e-3;
};

struct RouterLearningRates {
  double w = 0.5;
  double w_dir = 0.5;
  double w_time = 0.05;
  double phi = 0.05;
  double pixel_net = 0.05;
  double gate_logits = 0.5;
};

struct OptimConfig {
  ExpertLearningRates expert;
  RouterLearningRates router;
  RAdamConfig radam;
  int stage1_steps = 2000;
  int stage2_steps = 1500;
  int distill_steps = 2000;
  /// Train views whose gradients are summed per step (in view-index order).
  int batch_views = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DistillConfig {
  double lambda = 0.5;

  void validate() const;
};

struct TrainLogRow {
  int step = 0;
  std::string stage;
  std::string label;
  double loss = 0.0;
  double psnr = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  /// Record every `every`-th step (the final step is always kept).
  int every = 1;

  void add(int step, int total, const std::string& stage, const std::string& label, double loss,
           double psnr);
  /// Header: step,stage,label,loss,psnr
  std::string to_csv() const;
};

/// Trains the groups enabled in `expert.trainable()` against the ground truth
/// of the train views. Returns the mean train loss after the last step.
double train_expert(ExpertModel& expert, const Dataset& dataset, const OptimConfig& optim,
                    const LossConfig& loss_cfg, int steps, const std::string& label,
                    TrainLog* log = nullptr);

/// Trains each expert independently with every group enabled, then freezes it.
/// Returns the final train loss of each expert.
std::vector<double> train_stage1(std::vector<ExpertModel>& experts, const Dataset& dataset,
                                 const OptimConfig& optim, const LossConfig& loss_cfg,
                                 TrainLog* log = nullptr);

/// Trains only the router on top of frozen experts. Throws StateError when an
/// expert is not frozen. Returns the final mean train loss.
double train_stage2(MoeModel& model, const Dataset& dataset, const OptimConfig& optim,
                    const LossConfig& loss_cfg, int steps, TrainLog* log = nullptr);

/// lambda L(G I_E, G I_GT) + (1 - lambda) L((1 - G) I_E, (1 - G) I_MoE),
/// with G the one-channel gate broadcast over color. Gradient is w.r.t. I_E.
LossResult distill_loss(const ImageBuffer& student, const ImageBuffer& ground_truth,
                        const ImageBuffer& teacher_blend, const ImageBuffer& gate, double lambda,
                        const LossConfig& loss_cfg);

/// Teacher outputs cached once per train view.
struct TeacherCache {
  std::vector<int> views;
  std::vector<ImageBuffer> gate;   // G'_k, one channel
  std::vector<ImageBuffer> blend;  // I_MoE
};

/// Throws InvalidInput when the teacher router produces no gating map (the
/// volume baseline) or `expert` is out of range.
TeacherCache build_teacher_cache(const MoeModel& teacher, int expert, const Dataset& dataset);

/// Trains `student` (all groups) with the distillation loss for
/// `optim.distill_steps` steps. Returns the final mean train loss.
double distill(ExpertModel& student, const TeacherCache& teacher, const Dataset& dataset,
               const DistillConfig& cfg, const OptimConfig& optim, const LossConfig& loss_cfg,
               TrainLog* log = nullptr);

struct ProgressivePruneConfig {
  double ratio = 0.4;
  int rounds = 2;
  int finetune_steps = 200;
  ImportanceReduction reduction = ImportanceReduction::kSum;
  /// When set, Gaussians are drawn uniformly at random instead of by score.
  bool random = false;
  std::uint64_t random_seed = 0;
};

/// Removes floor(ratio * N) Gaussians in `rounds` equal steps, fine-tuning the
/// router between rounds. Returns one report per round.
std::vector<PruneReport> progressive_prune(MoeModel& model, const Dataset& dataset,
                                           const ProgressivePruneConfig& cfg,
                                           const OptimConfig& optim, const LossConfig& loss_cfg,
                                           TrainLog* log = nullptr);

struct EvalRow {
  int view = 0;
  double time = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

EvalResult evaluate_expert(const ExpertModel& expert, const Dataset& dataset, Split split);
EvalResult evaluate_moe(const MoeModel& model, const Dataset& dataset, Split split);
/// Uniform 1/K blend of the experts (no router).
EvalResult evaluate_uniform(const std::vector<ExpertModel>& experts, const Dataset& dataset,
                            Split split);

/// Renders the mixture for one view.
MoePass render_moe(const MoeModel& model, const View& view);

}  // namespace moesplat
