// SPDX-License-Identifier: Apache-2.0
//
// Gaussian primitives, cameras, views and datasets, plus the covariance and
// perspective-projection math shared by every renderer in the library.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <optional>
#include <vector>

#include "moesplat/image.hpp"

namespace moesplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Quat = Eigen::Quaterniond;

/// Added to every projected 2D covariance (pixel^2) before inversion.
inline constexpr double kCov2dRegularization = 0.3;
inline constexpr double kQuatNormTolerance = 1e-9;

struct Gaussian3D {
  Vec3 mean = Vec3::Zero();
  Quat rotation = Quat::Identity();
  Vec3 scale = Vec3::Ones();
  double opacity = 1.0;
  Vec3 color = Vec3::Zero();
};

/// Builds a Gaussian, normalizing the quaternion and checking every invariant.
/// Throws InvalidParameter on non-positive scale or out-of-range opacity/color.
Gaussian3D make_gaussian(const Vec3& mean, const Quat& rotation, const Vec3& scale,
                         double opacity, const Vec3& color);
void validate(const Gaussian3D& g);

/// Sigma = R S S^T R^T.
Mat3 covariance_from_rs(const Quat& rotation, const Vec3& scale);

/// Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1].
double gaussian_density_at(const Gaussian3D& g, const Vec3& x);

/// Pinhole camera. `orientation` rotates camera-frame vectors into the world
/// frame; the camera looks down +z with +x right and +y down in the image.
/// Pixel (x, y) is sampled at continuous coordinate (x, y).
struct Camera {
  Vec3 position = Vec3::Zero();
  Quat orientation = Quat::Identity();
  Vec2 focal = Vec2(1.0, 1.0);
  Vec2 principal_point = Vec2::Zero();
  Resolution resolution;
  double near_clip = 0.01;

  Mat3 world_to_camera() const { return orientation.toRotationMatrix().transpose(); }
  Vec3 to_camera(const Vec3& world) const { return world_to_camera() * (world - position); }
};

Camera make_camera(const Vec3& position, const Quat& orientation, const Vec2& focal,
                   const Vec2& principal_point, Resolution resolution, double near_clip);

/// Camera at `position` looking at `target`, with world `up` mapping to image-up.
Camera look_at_camera(const Vec3& position, const Vec3& target, const Vec3& up,
                      double focal, Resolution resolution, double near_clip = 0.05);

void validate(const Camera& camera);

struct Splat2D {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Identity();
  double depth = 1.0;
};

/// Projection result with the intermediates needed to push image-space
/// gradients back onto the 3D mean.
struct ProjectedGaussian {
  Splat2D splat;
  Vec3 camera_point;
  Mat3 camera_cov;  // W Sigma W^T
};

/// Perspective projection with first-order (EWA) covariance. Returns nullopt
/// when the mean lies in front of the near plane (culled, not an error).
std::optional<ProjectedGaussian> project_gaussian_detailed(const Camera& camera,
                                                           const Gaussian3D& g);
std::optional<Splat2D> project_gaussian(const Camera& camera, const Gaussian3D& g);

/// d loss / d world-space mean, given d loss / d mean2d and d loss / d cov2d
/// (full 2x2 matrix gradient). Rotation and scale are held fixed.
Vec3 project_mean_backward(const Camera& camera, const ProjectedGaussian& proj,
                           const Vec2& d_mean2d, const Mat2& d_cov2d);

/// Unit viewing direction through continuous pixel coordinate u, in the camera
/// frame. Throws InvalidParameter if u lies outside [0,W) x [0,H).
Vec3 pixel_ray_camera(const Camera& camera, const Vec2& u);
/// Same ray rotated into the world frame.
Vec3 pixel_ray(const Camera& camera, const Vec2& u);

struct View {
  Camera camera;
  double time = 0.0;
  std::optional<ImageBuffer> ground_truth;
};

enum class Split { kTrain, kTest };

struct Dataset {
  std::vector<View> views;
  std::vector<Split> split;
  /// Index of the camera rig each view was captured from; views with equal
  /// rig ids share a pose.
  std::vector<int> camera_id;

  std::vector<int> indices(Split which) const;
  std::vector<int> train_indices() const { return indices(Split::kTrain); }
  std::vector<int> test_indices() const { return indices(Split::kTest); }
  Resolution resolution() const;
};

/// Checks: at least one train view, consistent resolutions, times in [0,1].
void validate(const Dataset& dataset);

}  // namespace moesplat
