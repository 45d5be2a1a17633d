// SPDX-License-Identifier: Apache-2.0
//
// Pixel-level expert gating.
//
// The volume-aware router gives every expert Gaussian a learnable triplet
// (w, w_dir, w_time). At time t the triplets [w, w_dir, t * w_time] are
// splatted with the owning expert's geometry, producing planes
// (w2D, w2D_dir, w2D_time). Logits are
//
//   R'_k = w2D_k + Phi(w2D_dir_k, w2D_time_k, ray)
//
// with Phi a small conv net shared by all experts, and G'_k = softmax_k(R'_k).
//
// Two baselines are provided for comparison: a pixel router that sees only
// pixel coordinates, time and ray direction, and a volume router that scales
// each Gaussian's opacity by a sigmoid gate before rasterization.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moesplat/experts.hpp"
#include "moesplat/image.hpp"
#include "moesplat/nn.hpp"
#include "moesplat/rasterizer.hpp"

namespace moesplat {

enum class RouterKind : std::uint8_t { kVolumeAware = 0, kPixel = 1, kVolume = 2 };

std::string to_string(RouterKind kind);
RouterKind router_kind_from_string(const std::string& name);

inline constexpr int kRefineInputs = 5;   // w2D_dir, w2D_time, ray xyz
inline constexpr int kRefineHidden = 8;
inline constexpr int kPixelRouterInputs = 6;  // x, y, t, ray xyz
inline constexpr int kPixelRouterHidden = 8;
/// Sigmoid saturation used for "fully open"/"fully closed" volume gates.
inline constexpr double kGateSaturation = 20.0;

struct ExpertWeights {
  std::vector<double> w;
  std::vector<double> w_dir;
  std::vector<double> w_time;

  int size() const { return static_cast<int>(w.size()); }
};

struct PerGaussianWeights {
  std::vector<ExpertWeights> experts;

  /// w = 0, w_dir and w_time ~ N(0, 0.01^2).
  static PerGaussianWeights initialize(const std::vector<int>& counts, std::uint64_t seed);
  static PerGaussianWeights zeros_like(const PerGaussianWeights& other);
  int expert_count() const { return static_cast<int>(experts.size()); }
};

/// Per-pixel logits R'_k and gates G'_k, stacked as K-channel images.
struct GatingMap {
  ImageBuffer logits;
  ImageBuffer gates;

  int expert_count() const { return gates.channels(); }
};

/// Softmax over channels with per-pixel max subtraction.
GatingMap softmax_gating(ImageBuffer logits);

/// World-frame unit ray per pixel (3 channels).
ImageBuffer ray_planes(const Camera& camera);

/// Splatted planes (w2D, w2D_dir, w2D_time) for each expert, projecting and
/// rasterizing each expert's Gaussians afresh. Opacity and geometry are
/// copied from the Gaussians. Throws InvalidInput on a count mismatch.
std::vector<RasterResult> splat_weights(const PerGaussianWeights& weights,
                                        const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
                                        const View& view);

/// Same planes for one expert, replayed over the expert's cached color render.
ImageBuffer splat_weights_cached(const ExpertWeights& weights, const ExpertRender& render);

struct VolumeAwareCache {
  ImageBuffer rays;
  std::vector<ImageBuffer> planes;
  std::vector<ConvNet::Cache> phi;
  bool valid = false;
};

/// Throws InvalidInput when `planes` is empty or resolutions disagree.
GatingMap route_volume_aware(const std::vector<ImageBuffer>& planes, const View& view,
                             const ConvNet& phi, VolumeAwareCache* cache = nullptr);

/// I_MoE = sum_k G'_k I_Ek.
ImageBuffer blend(const GatingMap& gating, std::span<const ImageBuffer> expert_images);

/// Inputs of the pixel router: normalized x, y in [-1,1], t, world ray.
ImageBuffer pixel_router_inputs(const View& view);
GatingMap route_pixel_baseline(const View& view, const ConvNet& net,
                               ConvNet::Cache* cache = nullptr);

struct VolumeBaselineResult {
  std::vector<ImageBuffer> expert_images;  // gated RGB render per expert
  std::vector<RasterResult> rasters;       // RGB + coverage, per expert
  std::vector<std::vector<int>> splat_gaussian;
  ImageBuffer coverage;                    // sum_k alpha coverage
  ImageBuffer blended;
};

/// Renders each expert with opacity * sigmoid(gate) and blends the sum,
/// normalized by the summed alpha coverage clamped below at 1.
VolumeBaselineResult route_volume_baseline(
    const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
    const std::vector<std::vector<double>>& gate_logits, const View& view);

/// Gradient of sum_u <d_blended, blended> with respect to the gate logits.
std::vector<std::vector<double>> volume_baseline_backward(
    const VolumeBaselineResult& result, const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
    const std::vector<std::vector<double>>& gate_logits, const ImageBuffer& d_blended);

/// Learnable router parameters for any of the three router kinds.
struct RouterState {
  RouterKind kind = RouterKind::kVolumeAware;
  PerGaussianWeights weights;  // volume-aware
  ConvNet phi;                 // volume-aware refinement, shared across experts
  ConvNet pixel_net;           // pixel baseline
  std::vector<std::vector<double>> gate_logits;  // volume baseline

  static RouterState create(RouterKind kind, const std::vector<int>& gaussian_counts,
                            std::uint64_t seed);
  int expert_count() const;
  /// Drops router entries of pruned Gaussians, mirroring ExpertModel::keep_only.
  void keep_only(int expert, const std::vector<bool>& keep);
  std::vector<std::uint8_t> parameter_bytes() const;
};

struct RouterGradients {
  PerGaussianWeights weights;
  std::vector<double> phi;
  std::vector<double> pixel_net;
  std::vector<std::vector<double>> gate_logits;

  static RouterGradients zeros_like(const RouterState& state);
  void add(const RouterGradients& other);
};

/// One routed forward pass with the caches router_backward needs.
struct MoePass {
  RouterKind kind = RouterKind::kVolumeAware;
  double time = 0.0;
  VolumeAwareCache volume_aware;
  ConvNet::Cache pixel;
  VolumeBaselineResult volume;
  std::vector<std::vector<Gaussian3D>> expert_gaussians;  // volume baseline only
  GatingMap gating;  // empty for the volume baseline
  ImageBuffer blended;
  bool valid = false;
};

/// `renders` holds each expert's cached render of `view`.
MoePass router_forward(const RouterState& state, const std::vector<ExpertModel>& experts,
                       std::span<const ExpertRender> renders, const View& view);

/// Exact gradient of sum_u <d_moe, I_MoE> over the router parameters.
/// Expert geometry is frozen. Throws StateError when `pass` is not a valid
/// forward cache for this state.
RouterGradients router_backward(const RouterState& state, std::span<const ExpertRender> renders,
                                const MoePass& pass, const ImageBuffer& d_moe);

/// A mixture: frozen experts plus the router that blends them.
struct MoeModel {
  std::vector<ExpertModel> experts;
  RouterState router;

  std::vector<int> gaussian_counts() const;
};

/// Renders every expert of the mixture for one view (expert index = source id).
std::vector<ExpertRender> render_experts(const std::vector<ExpertModel>& experts, const View& view);

}  // namespace moesplat
