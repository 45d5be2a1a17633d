// SPDX-License-Identifier: Apache-2.0
#include "moesplat/scene.hpp"

#include <cmath>
#include <string>

#include "moesplat/errors.hpp"

namespace moesplat {

namespace {

bool in_unit_interval(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

void validate(const Gaussian3D& g) {
  if (std::abs(g.rotation.norm() - 1.0) > kQuatNormTolerance) {
    throw InvalidParameter("Gaussian3D: rotation quaternion is not unit length");
  }
  if (!(g.scale.array() > 0.0).all()) {
    throw InvalidParameter("Gaussian3D: scale components must be positive");
  }
  if (!in_unit_interval(g.opacity)) {
    throw InvalidParameter("Gaussian3D: opacity outside [0,1]");
  }
  for (int i = 0; i < 3; ++i) {
    if (!in_unit_interval(g.color[i])) {
      throw InvalidParameter("Gaussian3D: color component outside [0,1]");
    }
  }
  if (!g.mean.allFinite()) throw InvalidParameter("Gaussian3D: non-finite mean");
}

Gaussian3D make_gaussian(const Vec3& mean, const Quat& rotation, const Vec3& scale,
                         double opacity, const Vec3& color) {
  if (rotation.norm() == 0.0) throw InvalidParameter("Gaussian3D: zero quaternion");
  Gaussian3D g{mean, rotation.normalized(), scale, opacity, color};
  validate(g);
  return g;
}

Mat3 covariance_from_rs(const Quat& rotation, const Vec3& scale) {
  if (!(scale.array() > 0.0).all()) {
    throw InvalidParameter("covariance_from_rs: scale components must be positive");
  }
  const Mat3 r = rotation.normalized().toRotationMatrix();
  const Mat3 rs = r * scale.asDiagonal();
  Mat3 sigma = rs * rs.transpose();
  // Exact symmetry regardless of rounding order.
  return 0.5 * (sigma + sigma.transpose());
}

double gaussian_density_at(const Gaussian3D& g, const Vec3& x) {
  // Sigma^-1 = R S^-2 R^T, evaluated in the Gaussian's local frame.
  const Vec3 local = g.rotation.conjugate() * (x - g.mean);
  const Vec3 scaled = local.cwiseQuotient(g.scale);
  return std::exp(-0.5 * scaled.squaredNorm());
}

void validate(const Camera& camera) {
  if (camera.resolution.height <= 0 || camera.resolution.width <= 0) {
    throw InvalidParameter("Camera: resolution must be positive");
  }
  if (!(camera.near_clip > 0.0)) throw InvalidParameter("Camera: near_clip must be positive");
  if (!(camera.focal.array() > 0.0).all()) {
    throw InvalidParameter("Camera: focal lengths must be positive");
  }
  if (std::abs(camera.orientation.norm() - 1.0) > kQuatNormTolerance) {
    throw InvalidParameter("Camera: orientation quaternion is not unit length");
  }
}

Camera make_camera(const Vec3& position, const Quat& orientation, const Vec2& focal,
                   const Vec2& principal_point, Resolution resolution, double near_clip) {
  if (orientation.norm() == 0.0) throw InvalidParameter("Camera: zero quaternion");
  Camera cam{position, orientation.normalized(), focal, principal_point, resolution, near_clip};
  validate(cam);
  return cam;
}

Camera look_at_camera(const Vec3& position, const Vec3& target, const Vec3& up,
                      double focal, Resolution resolution, double near_clip) {
  const Vec3 z = (target - position).normalized();
  Vec3 y = -(up - up.dot(z) * z);
  if (y.norm() < 1e-12) throw InvalidParameter("look_at_camera: up parallel to view direction");
  y.normalize();
  const Vec3 x = y.cross(z);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  const Vec2 pp(0.5 * resolution.width, 0.5 * resolution.height);
  return make_camera(position, Quat(r), Vec2(focal, focal), pp, resolution, near_clip);
}

std::optional<ProjectedGaussian> project_gaussian_detailed(const Camera& camera,
                                                           const Gaussian3D& g) {
  const Mat3 w = camera.world_to_camera();
  const Vec3 t = w * (g.mean - camera.position);
  if (!(t.z() >= camera.near_clip)) return std::nullopt;

  const double fx = camera.focal.x();
  const double fy = camera.focal.y();
  const double inv_z = 1.0 / t.z();

  ProjectedGaussian out;
  out.camera_point = t;
  out.splat.depth = t.z();
  out.splat.mean2d = Vec2(fx * t.x() * inv_z + camera.principal_point.x(),
                          fy * t.y() * inv_z + camera.principal_point.y());

  Mat23 j;
  j << fx * inv_z, 0.0, -fx * t.x() * inv_z * inv_z,
       0.0, fy * inv_z, -fy * t.y() * inv_z * inv_z;
  out.camera_cov = w * covariance_from_rs(g.rotation, g.scale) * w.transpose();
  Mat2 cov = j * out.camera_cov * j.transpose();
  cov = 0.5 * (cov + cov.transpose());
  cov.diagonal().array() += kCov2dRegularization;
  out.splat.cov2d = cov;
  return out;
}

std::optional<Splat2D> project_gaussian(const Camera& camera, const Gaussian3D& g) {
  auto p = project_gaussian_detailed(camera, g);
  if (!p) return std::nullopt;
  return p->splat;
}

Vec3 project_mean_backward(const Camera& camera, const ProjectedGaussian& proj,
                           const Vec2& d_mean2d, const Mat2& d_cov2d) {
  const double fx = camera.focal.x();
  const double fy = camera.focal.y();
  const Vec3& t = proj.camera_point;
  const double iz = 1.0 / t.z();
  const double iz2 = iz * iz;
  const double iz3 = iz2 * iz;

  Mat23 j;
  j << fx * iz, 0.0, -fx * t.x() * iz2,
       0.0, fy * iz, -fy * t.y() * iz2;

  // Through the mean: d mean2d / dt = J.
  Vec3 d_t = j.transpose() * d_mean2d;

  // Through the covariance: cov2d = J M J^T => dL/dJ = (G + G^T) J M.
  const Mat23 d_j = (d_cov2d + d_cov2d.transpose()) * j * proj.camera_cov;
  d_t.x() += d_j(0, 2) * (-fx * iz2);
  d_t.y() += d_j(1, 2) * (-fy * iz2);
  d_t.z() += d_j(0, 0) * (-fx * iz2) + d_j(0, 2) * (2.0 * fx * t.x() * iz3) +
             d_j(1, 1) * (-fy * iz2) + d_j(1, 2) * (2.0 * fy * t.y() * iz3);

  return camera.orientation.toRotationMatrix() * d_t;
}

Vec3 pixel_ray_camera(const Camera& camera, const Vec2& u) {
  if (!(u.x() >= 0.0 && u.x() < camera.resolution.width && u.y() >= 0.0 &&
        u.y() < camera.resolution.height)) {
    throw InvalidParameter("pixel_ray: pixel outside image bounds");
  }
  const Vec3 d((u.x() - camera.principal_point.x()) / camera.focal.x(),
               (u.y() - camera.principal_point.y()) / camera.focal.y(), 1.0);
  return d.normalized();
}

Vec3 pixel_ray(const Camera& camera, const Vec2& u) {
  return (camera.orientation * pixel_ray_camera(camera, u)).normalized();
}

std::vector<int> Dataset::indices(Split which) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == which) out.push_back(static_cast<int>(i));
  }
  return out;
}

Resolution Dataset::resolution() const {
  if (views.empty()) throw InvalidInput("Dataset: no views");
  return views.front().camera.resolution;
}

void validate(const Dataset& dataset) {
  if (dataset.views.size() != dataset.split.size()) {
    throw InvalidInput("Dataset: split tags do not match view count");
  }
  if (!dataset.camera_id.empty() && dataset.camera_id.size() != dataset.views.size()) {
    throw InvalidInput("Dataset: camera ids do not match view count");
  }
  if (dataset.train_indices().empty()) throw InvalidInput("Dataset: no train views");
  const Resolution res = dataset.resolution();
  for (const View& v : dataset.views) {
    validate(v.camera);
    if (!(v.time >= 0.0 && v.time <= 1.0)) {
      throw InvalidParameter("Dataset: view time outside [0,1]");
    }
    if (v.camera.resolution != res) throw InvalidInput("Dataset: mixed camera resolutions");
    if (v.ground_truth && v.ground_truth->resolution() != res) {
      throw InvalidInput("Dataset: ground-truth resolution differs from camera");
    }
  }
}

}  // namespace moesplat
