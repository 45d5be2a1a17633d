// SPDX-License-Identifier: Apache-2.0
#include "moesplat/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moesplat/errors.hpp"

namespace moesplat {

namespace {

constexpr double kSupportMahalanobisSq = kSupportSigma * kSupportSigma;

struct Conic {
  double xx, xy, yy;
};

Conic invert_cov(const Mat2& cov) {
  const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  if (!(det > 0.0) || !(cov(0, 0) > 0.0)) {
    throw InvalidInput("rasterize: 2D covariance is not positive definite");
  }
  const double inv = 1.0 / det;
  return {cov(1, 1) * inv, -0.5 * (cov(0, 1) + cov(1, 0)) * inv, cov(0, 0) * inv};
}

// Squared Mahalanobis distance of the offset d under the conic.
inline double mahalanobis_sq(const PreparedSplat& s, double dx, double dy) {
  return s.conic_xx * dx * dx + 2.0 * s.conic_xy * dx * dy + s.conic_yy * dy * dy;
}

int tiles_along(int pixels) { return (pixels + kTileSize - 1) / kTileSize; }

}  // namespace

double alpha_of(const ChannelSplat& splat, const Vec2& u) {
  const Conic q = invert_cov(splat.splat.cov2d);
  const double dx = u.x() - splat.splat.mean2d.x();
  const double dy = u.y() - splat.splat.mean2d.y();
  const double m = q.xx * dx * dx + 2.0 * q.xy * dx * dy + q.yy * dy * dy;
  if (m > kSupportMahalanobisSq) return 0.0;
  return std::min(splat.opacity * std::exp(-0.5 * m), kAlphaMax);
}

RasterResult rasterize(std::span<const ChannelSplat> splats, Resolution resolution,
                       int channels) {
  if (resolution.height <= 0 || resolution.width <= 0) {
    throw InvalidParameter("rasterize: resolution must be positive");
  }
  if (channels < 0) channels = splats.empty() ? 3 : static_cast<int>(splats.front().channels.size());
  for (const ChannelSplat& s : splats) {
    if (static_cast<int>(s.channels.size()) != channels) {
      throw InvalidInput("rasterize: mixed channel counts");
    }
    if (!(s.opacity >= 0.0 && s.opacity <= 1.0)) {
      throw InvalidInput("rasterize: opacity outside [0,1]");
    }
    if (!std::isfinite(s.splat.depth) || !s.splat.mean2d.allFinite()) {
      throw InvalidInput("rasterize: non-finite splat depth or mean");
    }
  }

  const std::size_t n = splats.size();
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const ChannelSplat& sa = splats[a];
    const ChannelSplat& sb = splats[b];
    if (sa.splat.depth != sb.splat.depth) return sa.splat.depth < sb.splat.depth;
    return sa.source < sb.source;
  });

  RasterResult result;
  RenderGraph& g = result.graph;
  g.resolution = resolution;
  g.channels = channels;
  g.splats.resize(n);
  g.channel_values.resize(n * channels);

  const int tiles_x = tiles_along(resolution.width);
  const int tiles_y = tiles_along(resolution.height);
  g.tile_splats.assign(static_cast<std::size_t>(tiles_x) * tiles_y, {});

  for (std::size_t k = 0; k < n; ++k) {
    const ChannelSplat& s = splats[order[k]];
    const Conic q = invert_cov(s.splat.cov2d);
    PreparedSplat& p = g.splats[k];
    p.mean = s.splat.mean2d;
    p.conic_xx = q.xx;
    p.conic_xy = q.xy;
    p.conic_yy = q.yy;
    p.opacity = s.opacity;
    p.depth = s.splat.depth;
    p.source = s.source;
    p.input_index = order[k];
    std::copy(s.channels.begin(), s.channels.end(), g.channel_values.begin() + k * channels);

    // Axis-aligned bounds of the support ellipse.
    const double rx = kSupportSigma * std::sqrt(s.splat.cov2d(0, 0));
    const double ry = kSupportSigma * std::sqrt(s.splat.cov2d(1, 1));
    const double x0 = std::max(0.0, std::floor(p.mean.x() - rx));
    const double x1 = std::min(resolution.width - 1.0, std::ceil(p.mean.x() + rx));
    const double y0 = std::max(0.0, std::floor(p.mean.y() - ry));
    const double y1 = std::min(resolution.height - 1.0, std::ceil(p.mean.y() + ry));
    if (x0 > x1 || y0 > y1) continue;
    const int tx0 = static_cast<int>(x0) / kTileSize;
    const int tx1 = static_cast<int>(x1) / kTileSize;
    const int ty0 = static_cast<int>(y0) / kTileSize;
    const int ty1 = static_cast<int>(y1) / kTileSize;
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        g.tile_splats[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(
            static_cast<std::uint32_t>(k));
  }

  const int num_tiles = tiles_x * tiles_y;
  std::vector<std::vector<Contributor>> tile_contribs(num_tiles);
  g.pixel_ranges.assign(resolution.pixels(), {});
  g.final_transmittance.assign(resolution.pixels(), 1.0);
  result.image = ImageBuffer(resolution, channels);

#pragma omp parallel for schedule(dynamic)
  for (int tile = 0; tile < num_tiles; ++tile) {
    const int tx = tile % tiles_x;
    const int ty = tile / tiles_x;
    const auto& list = g.tile_splats[tile];
    auto& local = tile_contribs[tile];
    const int ye = std::min(resolution.height, (ty + 1) * kTileSize);
    const int xe = std::min(resolution.width, (tx + 1) * kTileSize);
    for (int y = ty * kTileSize; y < ye; ++y) {
      for (int x = tx * kTileSize; x < xe; ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * resolution.width + x;
        auto out = result.image.pixel(y, x);
        double t = 1.0;
        const auto begin = static_cast<std::uint32_t>(local.size());
        for (std::uint32_t k : list) {
          const PreparedSplat& s = g.splats[k];
          const double dx = x - s.mean.x();
          const double dy = y - s.mean.y();
          const double m = mahalanobis_sq(s, dx, dy);
          if (m > kSupportMahalanobisSq) continue;
          const double alpha = std::min(s.opacity * std::exp(-0.5 * m), kAlphaMax);
          local.push_back({k, alpha, t});
          const double w = alpha * t;
          const double* ch = g.channel_values.data() + static_cast<std::size_t>(k) * channels;
          for (int c = 0; c < channels; ++c) out[c] += w * ch[c];
          t *= 1.0 - alpha;
          if (t < kTransmittanceFloor) break;
        }
        // Offsets are tile-local here and rebased after the parallel region.
        g.pixel_ranges[pix] = {begin, static_cast<std::uint32_t>(local.size()) - begin};
        g.final_transmittance[pix] = t;
      }
    }
  }

  std::vector<std::uint32_t> tile_offset(num_tiles + 1, 0);
  for (int tile = 0; tile < num_tiles; ++tile) {
    tile_offset[tile + 1] = tile_offset[tile] + static_cast<std::uint32_t>(tile_contribs[tile].size());
  }
  g.contributors.resize(tile_offset.back());
  for (int tile = 0; tile < num_tiles; ++tile) {
    std::copy(tile_contribs[tile].begin(), tile_contribs[tile].end(),
              g.contributors.begin() + tile_offset[tile]);
    const int tx = tile % tiles_x;
    const int ty = tile / tiles_x;
    const int ye = std::min(resolution.height, (ty + 1) * kTileSize);
    const int xe = std::min(resolution.width, (tx + 1) * kTileSize);
    for (int y = ty * kTileSize; y < ye; ++y)
      for (int x = tx * kTileSize; x < xe; ++x)
        g.pixel_ranges[static_cast<std::size_t>(y) * resolution.width + x].begin += tile_offset[tile];
  }
  return result;
}

ImageBuffer RenderGraph::replay() const {
  ImageBuffer out(resolution, channels);
  for (int y = 0; y < resolution.height; ++y) {
    for (int x = 0; x < resolution.width; ++x) {
      auto px = out.pixel(y, x);
      for (const Contributor& c : pixel_contributors(y, x)) {
        const double w = c.alpha * c.transmittance;
        const double* ch = channel_values.data() + static_cast<std::size_t>(c.splat) * channels;
        for (int k = 0; k < channels; ++k) px[k] += w * ch[k];
      }
    }
  }
  return out;
}

ImageBuffer RenderGraph::replay(std::span<const double> values_by_input, int value_channels) const {
  if (value_channels <= 0 || values_by_input.size() != splats.size() * value_channels) {
    throw InvalidInput("RenderGraph::replay: value array does not match splat count");
  }
  ImageBuffer out(resolution, value_channels);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < resolution.height; ++y) {
    for (int x = 0; x < resolution.width; ++x) {
      auto px = out.pixel(y, x);
      for (const Contributor& c : pixel_contributors(y, x)) {
        const double w = c.alpha * c.transmittance;
        const double* v = values_by_input.data() +
                          static_cast<std::size_t>(splats[c.splat].input_index) * value_channels;
        for (int k = 0; k < value_channels; ++k) px[k] += w * v[k];
      }
    }
  }
  return out;
}

std::vector<double> channel_backward(const RenderGraph& graph, const ImageBuffer& upstream) {
  if (upstream.resolution() != graph.resolution) {
    throw InvalidInput("channel_backward: upstream resolution does not match graph");
  }
  const int channels = upstream.channels();
  std::vector<double> grad(graph.splats.size() * channels, 0.0);
  // Sequential row-major accumulation keeps the summation order fixed.
  for (int y = 0; y < graph.resolution.height; ++y) {
    for (int x = 0; x < graph.resolution.width; ++x) {
      auto up = upstream.pixel(y, x);
      for (const Contributor& c : graph.pixel_contributors(y, x)) {
        const double w = c.alpha * c.transmittance;
        double* g = grad.data() +
                    static_cast<std::size_t>(graph.splats[c.splat].input_index) * channels;
        for (int k = 0; k < channels; ++k) g[k] += w * up[k];
      }
    }
  }
  return grad;
}

SplatGradients backward(const RenderGraph& graph, const ImageBuffer& upstream) {
  if (upstream.resolution() != graph.resolution || upstream.channels() != graph.channels) {
    throw InvalidInput("backward: upstream shape does not match render graph");
  }
  const int channels = graph.channels;
  const std::size_t n = graph.splats.size();

  // One slot per contributor record: [d_channels..., d_alpha_opacity, d_mean x, d_mean y,
  // d_conic xx, d_conic xy, d_conic yy]. Slots are reduced in record order below.
  const int stride = channels + 6;
  std::vector<double> slots(graph.contributors.size() * stride, 0.0);
  const int width = graph.resolution.width;

#pragma omp parallel
  {
    std::vector<double> suffix(channels);
#pragma omp for schedule(static)
    for (int y = 0; y < graph.resolution.height; ++y) {
      for (int x = 0; x < width; ++x) {
        const auto range = graph.pixel_ranges[static_cast<std::size_t>(y) * width + x];
        if (range.count == 0) continue;
        auto up = upstream.pixel(y, x);
        std::fill(suffix.begin(), suffix.end(), 0.0);
        for (std::uint32_t r = range.count; r-- > 0;) {
          const std::uint32_t idx = range.begin + r;
          const Contributor& c = graph.contributors[idx];
          const PreparedSplat& s = graph.splats[c.splat];
          const double* ch = graph.channel_values.data() + static_cast<std::size_t>(c.splat) * channels;
          double* slot = slots.data() + static_cast<std::size_t>(idx) * stride;

          double ch_dot_up = 0.0;
          double suffix_dot_up = 0.0;
          for (int k = 0; k < channels; ++k) {
            slot[k] = c.alpha * c.transmittance * up[k];
            ch_dot_up += ch[k] * up[k];
            suffix_dot_up += suffix[k] * up[k];
          }
          const double d_alpha = c.transmittance * ch_dot_up - suffix_dot_up / (1.0 - c.alpha);
          for (int k = 0; k < channels; ++k) suffix[k] += ch[k] * c.alpha * c.transmittance;

          const double dx = x - s.mean.x();
          const double dy = y - s.mean.y();
          const double gval = std::exp(-0.5 * mahalanobis_sq(s, dx, dy));
          if (s.opacity * gval >= kAlphaMax) continue;  // clamped: flat in every input
          const double d_power = d_alpha * s.opacity * gval;
          slot[channels] = d_alpha * gval;
          // power = -0.5 d^T Q d, d = u - mean  =>  d power / d mean = Q d.
          slot[channels + 1] = d_power * (s.conic_xx * dx + s.conic_xy * dy);
          slot[channels + 2] = d_power * (s.conic_xy * dx + s.conic_yy * dy);
          slot[channels + 3] = -0.5 * d_power * dx * dx;
          slot[channels + 4] = -0.5 * d_power * dx * dy;  // each off-diagonal entry
          slot[channels + 5] = -0.5 * d_power * dy * dy;
        }
      }
    }
  }

  SplatGradients out;
  out.channels = channels;
  out.d_channels.assign(n * channels, 0.0);
  out.d_opacity.assign(n, 0.0);
  out.d_mean2d.assign(n, Vec2::Zero());
  std::vector<Eigen::Vector3d> d_conic(n, Eigen::Vector3d::Zero());
  for (std::size_t idx = 0; idx < graph.contributors.size(); ++idx) {
    const std::uint32_t k = graph.contributors[idx].splat;
    const double* slot = slots.data() + idx * stride;
    double* dc = out.d_channels.data() + static_cast<std::size_t>(k) * channels;
    for (int c = 0; c < channels; ++c) dc[c] += slot[c];
    out.d_opacity[k] += slot[channels];
    out.d_mean2d[k] += Vec2(slot[channels + 1], slot[channels + 2]);
    d_conic[k] += Eigen::Vector3d(slot[channels + 3], slot[channels + 4], slot[channels + 5]);
  }

  // Sorted order -> input order; conic gradient -> covariance gradient
  // (dL/dCov = -Q dL/dQ Q).
  SplatGradients result;
  result.channels = channels;
  result.d_channels.assign(n * channels, 0.0);
  result.d_opacity.assign(n, 0.0);
  result.d_mean2d.assign(n, Vec2::Zero());
  result.d_cov2d.assign(n, Mat2::Zero());
  for (std::size_t k = 0; k < n; ++k) {
    const PreparedSplat& s = graph.splats[k];
    const std::uint32_t in = s.input_index;
    std::copy_n(out.d_channels.begin() + k * channels, channels,
                result.d_channels.begin() + static_cast<std::size_t>(in) * channels);
    result.d_opacity[in] = out.d_opacity[k];
    result.d_mean2d[in] = out.d_mean2d[k];
    Mat2 q;
    q << s.conic_xx, s.conic_xy, s.conic_xy, s.conic_yy;
    Mat2 gq;
    gq << d_conic[k].x(), d_conic[k].y(), d_conic[k].y(), d_conic[k].z();
    result.d_cov2d[in] = -q * gq * q;
  }
  return result;
}

}  // namespace moesplat
