// SPDX-License-Identifier: Apache-2.0
//
// Procedural multi-regime scenes with known ground truth.
//
// A scene is a handful of regions, each a cluster of Gaussians sharing one
// motion regime: a static textured backdrop, a smooth quadratic arc, or a
// piecewise-linear zigzag through evenly spaced knots. Ground-truth images are
// rendered from the generator's own Gaussians by the rasterizer, so every
// image is reproducible from (seed, spec).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moesplat/experts.hpp"
#include "moesplat/image.hpp"
#include "moesplat/scene.hpp"

namespace moesplat {

enum class MotionRegime { kStatic, kPolynomial, kKeyframe };

std::string to_string(MotionRegime regime);
MotionRegime motion_regime_from_string(const std::string& name);

struct RegionSpec {
  MotionRegime regime = MotionRegime::kStatic;
  int gaussian_count = 0;
  Vec3 center = Vec3::Zero();
  /// Cluster radius; for the static backdrop, the half-width of the plane.
  double radius = 0.3;
  /// Peak displacement of the motion path in world units.
  double amplitude = 0.4;
  /// Typical Gaussian standard deviation in world units.
  double scale = 0.06;
};

struct SceneSpec {
  Resolution resolution{64, 64};
  double focal = 64.0;
  int camera_count = 4;
  double camera_distance = 4.0;
  double arc_degrees = 20.0;  // outermost camera azimuth
  int train_views = 20;
  int test_views = 5;
  std::vector<RegionSpec> regions;

  /// Static backdrop, quadratic arc on the left, zigzag on the right.
  static SceneSpec two_regime();
  /// 32x32, 50 Gaussians in total.
  static SceneSpec micro();

  int gaussian_count() const;
  void validate() const;
};

/// Ground-truth renderer: one component model per region, composited jointly.
struct GroundTruth {
  std::vector<ExpertModel> components;  // one per region
  std::vector<MotionRegime> regimes;

  std::vector<Gaussian3D> gaussians_at(double t) const;
  /// Region index of every Gaussian in gaussians_at() order.
  std::vector<int> region_of_gaussian() const;
  ImageBuffer render(const Camera& camera, double t) const;
  /// Per-pixel visible weight (sum of alpha * T) of one region's Gaussians.
  ImageBuffer region_weight(int region, const Camera& camera, double t) const;
};

struct SynthScene {
  SceneSpec spec;
  std::uint64_t seed = 0;
  GroundTruth truth;
  Dataset dataset;
};

/// Pure function of (seed, spec). Throws InvalidParameter for a spec with no
/// Gaussians or no views.
SynthScene synth_scene(std::uint64_t seed, const SceneSpec& spec);

/// Train-view times: view i of n lies at i / (n - 1).
std::vector<double> train_times(const SynthScene& scene);

struct ExpertInit {
  /// Gaussians per ground-truth Gaussian; the extra fraction is drawn with replacement.
  double overparameterization = 1.5;
  /// Standard deviation of the positional noise added to the initial trajectory.
  double position_noise = 0.05;
  double scale_jitter = 0.1;
};

/// Initializes an expert from the ground-truth trajectories, standing in for
/// the per-frame point clouds real pipelines start from. Polynomial experts
/// get the least-squares fit over the train times, keyframe experts the
/// positions at their knots, deform experts the mid-sequence positions.
/// Colors and opacities start random.
ExpertModel init_expert(ExpertKind kind, const SynthScene& scene, std::uint64_t seed,
                        const ExpertInit& init = {});

}  // namespace moesplat
