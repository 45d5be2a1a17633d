// SPDX-License-Identifier: Apache-2.0
//
// Single-pass multi-expert rendering and gate-aware pruning.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moesplat/experts.hpp"
#include "moesplat/rasterizer.hpp"
#include "moesplat/router.hpp"
#include "moesplat/scene.hpp"

namespace moesplat {

/// Work counters; each field counts whole-batch passes, not per-splat work.
struct RenderCounters {
  std::uint64_t projection_passes = 0;
  std::uint64_t sort_passes = 0;
  std::uint64_t composite_passes = 0;
  std::uint64_t splats_projected = 0;
};

/// All experts' splats in one globally depth-sorted list. The expert identity
/// of each splat is `source.expert`.
struct MergedBatch {
  int expert_count = 0;
  std::vector<ChannelSplat> splats;
  Resolution resolution;
  bool sorted = false;

  /// Projects every expert's Gaussians at the view's time once and sorts the
  /// concatenation once by (depth, expert, gaussian).
  static MergedBatch build(const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
                           const Camera& camera, RenderCounters* counters = nullptr);
  static MergedBatch build(const std::vector<ExpertModel>& experts, const View& view,
                           RenderCounters* counters = nullptr);

  /// Appends `count` channels to every splat; values[k] holds `count` scalars
  /// per Gaussian of expert k. Used to carry router weights through the same pass.
  void append_channels(const std::vector<std::vector<double>>& values, int count);
  int channels() const;
};

struct SinglePassOptions {
  /// Keep one transmittance per expert. This reproduces K independent renders
  /// exactly; false composites every expert against the shared merged order.
  bool independent_transmittance = true;
};

/// C_k(u) = sum_j T_j(u) alpha_j(u) c_j [expert(j) == k], one composite pass.
/// Every splat must carry the same number of channels. Throws StateError when
/// the batch is not in depth order.
std::vector<ImageBuffer> render_single_pass(const MergedBatch& batch,
                                            const SinglePassOptions& options = {},
                                            RenderCounters* counters = nullptr);

/// How d(G'_k map)/d(w_i^per) is reduced to a scalar per view.
enum class ImportanceReduction {
  kSum,        // || d sum_u G'_k(u) / d w_i^per ||
  kMean,       // || d mean_u G'_k(u) / d w_i^per ||
  kFrobenius,  // sqrt(sum_u || d G'_k(u) / d w_i^per ||^2)
};

std::string to_string(ImportanceReduction r);
ImportanceReduction importance_reduction_from_string(const std::string& name);

struct ImportanceTable {
  std::vector<std::vector<double>> scores;  // [expert][gaussian]
  int view_count = 0;

  std::size_t total() const;
};

/// Scores every Gaussian of a volume-aware mixture by the gradient norm of its
/// owning expert's gating map with respect to its splatted weight vector
/// [w, w_dir, t * w_time], averaged over the dataset's train views.
ImportanceTable importance_scores(const MoeModel& model, const Dataset& dataset,
                                  ImportanceReduction reduction = ImportanceReduction::kSum);

struct PrunePolicy {
  enum class Mode { kThreshold, kRatio };
  Mode mode = Mode::kRatio;
  double value = 0.0;

  static PrunePolicy threshold(double tau) { return {Mode::kThreshold, tau}; }
  static PrunePolicy ratio(double rho) { return {Mode::kRatio, rho}; }
};

struct PruneReport {
  struct Row {
    int expert = 0;
    int kept = 0;
    int removed = 0;
    double cutoff = 0.0;  // largest removed score, 0 when nothing removed
    double p25 = 0.0;
    double p50 = 0.0;
    double p75 = 0.0;
  };
  std::vector<Row> rows;
  std::size_t bytes_before = 0;
  std::size_t bytes_after = 0;
  std::vector<std::vector<bool>> removed;  // [expert][gaussian] before pruning

  int total_removed() const;
};

/// Selects Gaussians to remove. Threshold: score < tau. Ratio: the lowest
/// floor(rho * N) scores, ties broken by (expert, gaussian). Throws
/// InvalidParameter for rho outside [0,1).
std::vector<std::vector<bool>> select_for_pruning(const ImportanceTable& table,
                                                  const PrunePolicy& policy);

/// The `count` lowest scores, ties broken by (expert, gaussian).
std::vector<std::vector<bool>> select_lowest(const ImportanceTable& table, std::size_t count);

/// Removes the selected Gaussians from the experts and their router entries.
PruneReport prune(MoeModel& model, const ImportanceTable& table, const PrunePolicy& policy);
/// Removes an explicit selection (used for random-pruning comparisons).
PruneReport prune_selected(MoeModel& model, const ImportanceTable& table,
                           const std::vector<std::vector<bool>>& removed);

/// Uniformly random selection of floor(rho * N) Gaussians.
std::vector<std::vector<bool>> random_pruning_selection(const std::vector<int>& counts, double rho,
                                                        std::uint64_t seed);
/// Uniformly random selection of exactly `count` Gaussians.
std::vector<std::vector<bool>> random_selection(const std::vector<int>& counts, std::size_t count,
                                                std::uint64_t seed);

/// Serialized bytes a Gaussian of this expert occupies in a checkpoint,
/// including its router triplet.
std::size_t bytes_per_gaussian(const ExpertModel& expert);

}  // namespace moesplat
