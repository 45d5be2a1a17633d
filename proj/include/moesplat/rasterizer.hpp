// SPDX-License-Identifier: Apache-2.0
//
// Tile-based front-to-back compositing of channel-generic 2D Gaussian splats
// with a replayable render graph and an analytic backward pass.
#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "moesplat/image.hpp"
#include "moesplat/scene.hpp"

namespace moesplat {

inline constexpr int kTileSize = 16;
/// Per-splat alpha is clamped to this value before compositing.
inline constexpr double kAlphaMax = 0.999;
/// Compositing stops once transmittance drops below this value.
inline constexpr double kTransmittanceFloor = 1e-4;
/// Splats have zero contribution outside the 3-sigma ellipse of cov2d.
inline constexpr double kSupportSigma = 3.0;

struct SourceId {
  int expert = 0;
  int gaussian = 0;
  auto operator<=>(const SourceId&) const = default;
};

struct ChannelSplat {
  Splat2D splat;
  std::vector<double> channels;
  double opacity = 1.0;
  SourceId source;
};

/// alpha = min(opacity * G2D(u), kAlphaMax), zero outside the support ellipse.
double alpha_of(const ChannelSplat& splat, const Vec2& u);

/// A splat after sorting, with its inverse covariance precomputed.
struct PreparedSplat {
  Vec2 mean = Vec2::Zero();
  double conic_xx = 0.0;
  double conic_xy = 0.0;
  double conic_yy = 0.0;
  double opacity = 0.0;
  double depth = 0.0;
  SourceId source;
  std::uint32_t input_index = 0;
};

struct Contributor {
  std::uint32_t splat = 0;     // index into RenderGraph::splats (sorted order)
  double alpha = 0.0;          // clamped alpha at this pixel
  double transmittance = 1.0;  // T before this contributor
};

/// Cached intermediates of one rasterization call.
struct RenderGraph {
  struct PixelRange {
    std::uint32_t begin = 0;
    std::uint32_t count = 0;
  };

  Resolution resolution;
  int channels = 0;
  std::vector<PreparedSplat> splats;   // front-to-back
  std::vector<double> channel_values;  // splats.size() x channels, sorted order
  std::vector<std::vector<std::uint32_t>> tile_splats;
  std::vector<PixelRange> pixel_ranges;  // row-major pixels
  std::vector<Contributor> contributors;
  std::vector<double> final_transmittance;

  std::size_t input_count() const { return splats.size(); }
  std::span<const Contributor> pixel_contributors(int y, int x) const {
    const PixelRange r = pixel_ranges[static_cast<std::size_t>(y) * resolution.width + x];
    return {contributors.data() + r.begin, r.count};
  }

  /// Recomposites the stored channel values over the cached contributor lists.
  ImageBuffer replay() const;
  /// Composites new per-splat values (indexed by input order, `channels`
  /// values per splat) over the same geometry and transmittances.
  ImageBuffer replay(std::span<const double> values_by_input, int channels) const;
};

struct RasterResult {
  ImageBuffer image;
  RenderGraph graph;
};

/// Composites splats sorted by (depth, expert, gaussian). `channels` < 0
/// infers the count from the splats (3 when the list is empty).
/// Throws InvalidInput on mixed channel counts or non-PD covariances.
RasterResult rasterize(std::span<const ChannelSplat> splats, Resolution resolution,
                       int channels = -1);

/// Gradients of sum_u <upstream(u), out(u)>, indexed by input order.
struct SplatGradients {
  int channels = 0;
  std::vector<double> d_channels;  // input_count x channels
  std::vector<double> d_opacity;
  std::vector<Vec2> d_mean2d;
  std::vector<Mat2> d_cov2d;  // full (non-symmetrized) matrix gradient
};

SplatGradients backward(const RenderGraph& graph, const ImageBuffer& upstream);

/// Channel-only gradient (geometry and opacity held fixed), input order.
/// The channel count is taken from `upstream`, so this also differentiates
/// replay() with a different channel layout.
std::vector<double> channel_backward(const RenderGraph& graph, const ImageBuffer& upstream);

}  // namespace moesplat
