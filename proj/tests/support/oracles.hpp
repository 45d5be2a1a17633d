// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations and random-scene builders shared by
// the unit tests and the acceptance binary. Nothing here calls the library's
// compositing code; the naive renderer re-derives every quantity per pixel.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "moesplat/rasterizer.hpp"
#include "moesplat/scene.hpp"

namespace oracle {

using moesplat::ChannelSplat;
using moesplat::ImageBuffer;
using moesplat::Resolution;
using moesplat::Vec2;
using moesplat::Vec3;

/// Per-pixel brute force: sort by (depth, expert, gaussian), evaluate the
/// Gaussian from the explicitly inverted 2x2 covariance, composite front to
/// back and stop after the contribution that pushes T below the floor.
inline ImageBuffer naive_rasterize(std::vector<ChannelSplat> splats, Resolution res, int channels) {
  std::stable_sort(splats.begin(), splats.end(), [](const ChannelSplat& a, const ChannelSplat& b) {
    if (a.splat.depth != b.splat.depth) return a.splat.depth < b.splat.depth;
    if (a.source.expert != b.source.expert) return a.source.expert < b.source.expert;
    return a.source.gaussian < b.source.gaussian;
  });
  ImageBuffer out(res, channels);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      double t = 1.0;
      for (const ChannelSplat& s : splats) {
        const double a = s.splat.cov2d(0, 0), b = s.splat.cov2d(0, 1), d = s.splat.cov2d(1, 1);
        const double det = a * d - b * b;
        const double dx = x - s.splat.mean2d.x(), dy = y - s.splat.mean2d.y();
        const double m = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        if (m > 9.0) continue;
        const double alpha = std::min(s.opacity * std::exp(-0.5 * m), 0.999);
        for (int c = 0; c < channels; ++c) out.at(y, x, c) += t * alpha * s.channels[c];
        t *= 1.0 - alpha;
        if (t < 1e-4) break;
      }
    }
  }
  return out;
}

/// Random anisotropic splats inside (and slightly beyond) the image.
inline std::vector<ChannelSplat> random_splats(std::mt19937_64& rng, int count, Resolution res, int channels,
                                               int expert = 0, double min_sigma = 1.0, double max_sigma = 6.0) {
  std::uniform_real_distribution<double> ux(-4.0, res.width + 4.0), uy(-4.0, res.height + 4.0);
  std::uniform_real_distribution<double> us(min_sigma, max_sigma), ua(0.0, M_PI), uo(0.05, 0.95),
      uc(0.0, 1.0), ud(1.0, 10.0);
  std::vector<ChannelSplat> out;
  for (int i = 0; i < count; ++i) {
    ChannelSplat s;
    s.splat.mean2d = Vec2(ux(rng), uy(rng));
    const double sx = us(rng), sy = us(rng), th = ua(rng);
    Eigen::Matrix2d r;
    r << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    s.splat.cov2d = r * Eigen::Vector2d(sx * sx, sy * sy).asDiagonal() * r.transpose();
    s.splat.depth = ud(rng);
    s.opacity = uo(rng);
    s.channels.resize(channels);
    for (double& c : s.channels) c = uc(rng);
    s.source = {expert, i};
    out.push_back(std::move(s));
  }
  return out;
}

/// Random 3D Gaussians in a box in front of a camera at (0,0,-4) looking at the origin.
inline std::vector<moesplat::Gaussian3D> random_gaussians(std::mt19937_64& rng, int count, double extent = 1.2,
                                                          double min_scale = 0.03, double max_scale = 0.15) {
  std::uniform_real_distribution<double> up(-extent, extent), us(min_scale, max_scale), uo(0.1, 0.9),
      uc(0.0, 1.0);
  std::normal_distribution<double> nq(0.0, 1.0);
  std::vector<moesplat::Gaussian3D> out;
  for (int i = 0; i < count; ++i) {
    moesplat::Gaussian3D g;
    g.mean = Vec3(up(rng), up(rng), up(rng));
    g.rotation = moesplat::Quat(nq(rng), nq(rng), nq(rng), nq(rng)).normalized();
    g.scale = Vec3(us(rng), us(rng), us(rng));
    g.opacity = uo(rng);
    g.color = Vec3(uc(rng), uc(rng), uc(rng));
    out.push_back(g);
  }
  return out;
}

inline moesplat::Camera front_camera(Resolution res, double focal, double azimuth = 0.0) {
  const Vec3 pos(4.0 * std::sin(azimuth), 0.3, -4.0 * std::cos(azimuth));
  return moesplat::look_at_camera(pos, Vec3::Zero(), Vec3(0, 1, 0), focal, res);
}

inline ImageBuffer random_image(std::mt19937_64& rng, Resolution res, int channels, double lo = -1.0,
                                double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ImageBuffer img(res, channels);
  for (double& v : img.data()) v = u(rng);
  return img;
}

inline double dot(const ImageBuffer& a, const ImageBuffer& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

/// Relative error with an absolute floor so that gradients that are exactly
/// zero on both sides compare equal.
inline double rel_err(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central finite difference of f around the current value of *x.
template <typename F>
double central_diff(double* x, double h, F&& f) {
  const double x0 = *x;
  *x = x0 + h;
  const double fp = f();
  *x = x0 - h;
  const double fm = f();
  *x = x0;
  return (fp - fm) / (2.0 * h);
}

/// A piecewise-constant fingerprint of a render: every pixel's contributor
/// list and which alphas hit the clamp. Finite differences are only
/// meaningful when this is identical at x + h and x - h.
inline std::vector<std::uint32_t> topology(const moesplat::RenderGraph& g) {
  std::vector<std::uint32_t> sig;
  sig.reserve(g.contributors.size() + g.pixel_ranges.size());
  for (const auto& r : g.pixel_ranges) {
    sig.push_back(r.count);
    for (std::uint32_t i = 0; i < r.count; ++i) {
      const auto& c = g.contributors[r.begin + i];
      sig.push_back(g.splats[c.splat].input_index * 2u + (c.alpha >= moesplat::kAlphaMax ? 1u : 0u));
    }
  }
  return sig;
}

}  // namespace oracle
