// SPDX-License-Identifier: Apache-2.0
#include "moesplat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/QR>

#include "moesplat/errors.hpp"
#include "moesplat/rasterizer.hpp"

namespace moesplat {

std::string to_string(MotionRegime regime) {
  switch (regime) {
    case MotionRegime::kStatic: return "static";
    case MotionRegime::kPolynomial: return "polynomial";
    case MotionRegime::kKeyframe: return "keyframe";
  }
  return "unknown";
}

MotionRegime motion_regime_from_string(const std::string& name) {
  if (name == "static") return MotionRegime::kStatic;
  if (name == "polynomial") return MotionRegime::kPolynomial;
  if (name == "keyframe") return MotionRegime::kKeyframe;
  throw InvalidParameter("unknown motion regime '" + name + "'");
}

SceneSpec SceneSpec::two_regime() {
  SceneSpec s;
  s.regions = {
      {MotionRegime::kStatic, 100, Vec3(0.0, 0.0, 1.5), 2.6, 0.0, 0.0},
      {MotionRegime::kPolynomial, 40, Vec3(-0.8, 0.1, 0.0), 0.35, 0.8, 0.06},
      {MotionRegime::kKeyframe, 40, Vec3(0.8, 0.0, 0.0), 0.35, 0.5, 0.06},
  };
  return s;
}

SceneSpec SceneSpec::micro() {
  SceneSpec s;
  s.resolution = {32, 32};
  s.focal = 32.0;
  s.train_views = 8;
  s.test_views = 4;
  s.regions = {
      {MotionRegime::kStatic, 16, Vec3(0.0, 0.0, 1.5), 2.6, 0.0, 0.0},
      {MotionRegime::kPolynomial, 17, Vec3(-0.8, 0.1, 0.0), 0.35, 0.8, 0.08},
      {MotionRegime::kKeyframe, 17, Vec3(0.8, 0.0, 0.0), 0.35, 0.5, 0.08},
  };
  return s;
}

int SceneSpec::gaussian_count() const {
  int n = 0;
  for (const RegionSpec& r : regions) n += r.gaussian_count;
  return n;
}

void SceneSpec::validate() const {
  if (regions.empty() || gaussian_count() <= 0) throw InvalidParameter("scene spec: no Gaussians");
  for (const RegionSpec& r : regions) {
    if (r.gaussian_count < 0) throw InvalidParameter("scene spec: negative Gaussian count");
    if (!(r.radius > 0.0)) throw InvalidParameter("scene spec: region radius must be positive");
    if (r.regime != MotionRegime::kStatic && !(r.scale > 0.0)) {
      throw InvalidParameter("scene spec: Gaussian scale must be positive");
    }
  }
  if (train_views <= 0) throw InvalidParameter("scene spec: no views");
  if (test_views < 0) throw InvalidParameter("scene spec: negative test view count");
  if (camera_count <= 0) throw InvalidParameter("scene spec: camera count must be positive");
  if (resolution.height <= 0 || resolution.width <= 0) {
    throw InvalidParameter("scene spec: resolution must be positive");
  }
  if (!(focal > 0.0) || !(camera_distance > 0.0)) {
    throw InvalidParameter("scene spec: focal and camera distance must be positive");
  }
}

std::vector<Gaussian3D> GroundTruth::gaussians_at(double t) const {
  std::vector<Gaussian3D> out;
  for (const ExpertModel& c : components) {
    auto g = c.gaussians_at(t);
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

std::vector<int> GroundTruth::region_of_gaussian() const {
  std::vector<int> out;
  for (std::size_t r = 0; r < components.size(); ++r) out.insert(out.end(), components[r].size(), static_cast<int>(r));
  return out;
}

ImageBuffer GroundTruth::render(const Camera& camera, double t) const {
  const auto splats = project_set(camera, gaussians_at(t), 0, nullptr, nullptr);
  return rasterize(splats, camera.resolution, 3).image;
}

ImageBuffer GroundTruth::region_weight(int region, const Camera& camera, double t) const {
  if (region < 0 || region >= static_cast<int>(components.size())) {
    throw InvalidParameter("region_weight: region index out of range");
  }
  const auto owner = region_of_gaussian();
  auto splats = project_set(camera, gaussians_at(t), 0, nullptr, nullptr);
  for (ChannelSplat& s : splats) {
    s.channels.assign(1, owner[s.source.gaussian] == region ? 1.0 : 0.0);
  }
  return rasterize(splats, camera.resolution, 1).image;
}

namespace {

Quat random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quat q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q;
}

// Zigzag knot offsets: alternating vertical swings with a slow horizontal drift.
Vec3 zigzag_knot(int m, int knots, double amp) {
  const double drift = knots > 1 ? -0.5 + static_cast<double>(m) / (knots - 1) : 0.0;
  const double swing = (m % 2 == 0) ? amp : -amp;
  return Vec3(0.4 * amp * drift, swing, 0.0);
}

ExpertModel make_region(const RegionSpec& r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Gaussian3D> base;
  base.reserve(r.gaussian_count);

  if (r.regime == MotionRegime::kStatic) {
    const int g = std::max(1, static_cast<int>(std::ceil(std::sqrt(r.gaussian_count))));
    const double step = 2.0 * r.radius / g;
    for (int i = 0; i < r.gaussian_count; ++i) {
      const int gx = i % g;
      const int gy = i / g;
      const double x = -r.radius + (gx + 0.5) * step;
      const double y = -r.radius + (gy + 0.5) * step;
      const double checker = ((gx + gy) % 2 == 0) ? 0.12 : -0.12;
      const Vec3 color(std::clamp(0.5 + 0.3 * std::sin(2.1 * x) + checker, 0.05, 0.95),
                       std::clamp(0.5 + 0.3 * std::cos(1.7 * y) - checker, 0.05, 0.95),
                       std::clamp(0.45 + 0.25 * std::sin(1.3 * (x + y)), 0.05, 0.95));
      const Vec3 jitter(0.1 * step * (u(rng) - 0.5), 0.1 * step * (u(rng) - 0.5), 0.0);
      base.push_back(make_gaussian(r.center + Vec3(x, y, 0.0) + jitter, Quat::Identity(),
                                   Vec3(0.6 * step, 0.6 * step, 0.02), 0.95, color));
    }
    ExpertModel m = ExpertModel::polynomial(base, 1);
    return m;
  }

  for (int i = 0; i < r.gaussian_count; ++i) {
    Vec3 offset;
    do {
      offset = Vec3(2.0 * u(rng) - 1.0, 2.0 * u(rng) - 1.0, 2.0 * u(rng) - 1.0);
    } while (offset.squaredNorm() > 1.0);
    const Vec3 scale(r.scale * std::exp(0.6 * u(rng) - 0.3), r.scale * std::exp(0.6 * u(rng) - 0.3),
                     r.scale * std::exp(0.6 * u(rng) - 0.3));
    const Vec3 color(0.1 + 0.8 * u(rng), 0.1 + 0.8 * u(rng), 0.1 + 0.8 * u(rng));
    const double opacity = 0.7 + 0.25 * u(rng);
    base.push_back(make_gaussian(r.center + r.radius * offset, random_rotation(rng), scale, opacity, color));
  }

  if (r.regime == MotionRegime::kPolynomial) {
    // mu(t) = p + A (t - 1/2) + B (t - 1/2)^2: a sideways sweep under a
    // parabolic vertical arc peaking mid-sequence.
    const Vec3 a(0.6 * r.amplitude, 0.0, 0.0);
    const Vec3 b(0.0, -4.0 * r.amplitude, 0.0);
    ExpertModel m = ExpertModel::polynomial(base, 2);
    for (int i = 0; i < m.size(); ++i) {
      const Vec3 p = base[i].mean + Vec3(0.0, r.amplitude, 0.0);
      m.set_coefficient(i, 0, p - 0.5 * a + 0.25 * b);
      m.set_coefficient(i, 1, a - b);
      m.set_coefficient(i, 2, b);
    }
    return m;
  }

  ExpertModel m = ExpertModel::keyframe(base, kDefaultKeyframeCount);
  for (int i = 0; i < m.size(); ++i) {
    for (int k = 0; k < m.keyframe_count(); ++k) {
      m.set_keyframe_mean(i, k, base[i].mean + zigzag_knot(k, m.keyframe_count(), r.amplitude));
    }
  }
  return m;
}

}  // namespace

SynthScene synth_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  SynthScene scene;
  scene.spec = spec;
  scene.seed = seed;
  std::mt19937_64 rng(seed);
  for (const RegionSpec& r : spec.regions) {
    if (r.gaussian_count == 0) continue;
    scene.truth.components.push_back(make_region(r, rng));
    scene.truth.regimes.push_back(r.regime);
  }

  std::vector<Camera> cameras;
  for (int c = 0; c < spec.camera_count; ++c) {
    const double f = spec.camera_count > 1 ? -1.0 + 2.0 * c / (spec.camera_count - 1) : 0.0;
    const double az = f * spec.arc_degrees * std::numbers::pi / 180.0;
    const double elev = (c % 2 == 0 ? -0.3 : 0.3);
    const Vec3 pos(spec.camera_distance * std::sin(az), elev, -spec.camera_distance * std::cos(az));
    cameras.push_back(look_at_camera(pos, Vec3::Zero(), Vec3(0.0, 1.0, 0.0), spec.focal, spec.resolution));
  }

  auto add_view = [&](int cam, double t, Split split) {
    View v;
    v.camera = cameras[cam];
    v.time = t;
    v.ground_truth = scene.truth.render(v.camera, t);
    scene.dataset.views.push_back(std::move(v));
    scene.dataset.split.push_back(split);
    scene.dataset.camera_id.push_back(cam);
  };
  for (int i = 0; i < spec.train_views; ++i) {
    const double t = spec.train_views > 1 ? static_cast<double>(i) / (spec.train_views - 1) : 0.0;
    add_view(i % spec.camera_count, t, Split::kTrain);
  }
  for (int j = 0; j < spec.test_views; ++j) {
    add_view(j % spec.camera_count, (2.0 * j + 1.0) / (2.0 * spec.test_views), Split::kTest);
  }
  validate(scene.dataset);
  return scene;
}

std::vector<double> train_times(const SynthScene& scene) {
  std::vector<double> out;
  for (int i : scene.dataset.train_indices()) out.push_back(scene.dataset.views[i].time);
  return out;
}

ExpertModel init_expert(ExpertKind kind, const SynthScene& scene, std::uint64_t seed,
                        const ExpertInit& init) {
  if (!(init.overparameterization >= 1.0)) {
    throw InvalidParameter("init_expert: overparameterization must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  struct Source {
    int component;
    int index;
  };
  std::vector<Source> gt;
  for (std::size_t c = 0; c < scene.truth.components.size(); ++c)
    for (int i = 0; i < scene.truth.components[c].size(); ++i) gt.push_back({static_cast<int>(c), i});
  if (gt.empty()) throw InvalidInput("init_expert: scene has no Gaussians");

  std::vector<Source> chosen = gt;
  const auto extra = static_cast<std::size_t>(std::floor((init.overparameterization - 1.0) * gt.size()));
  std::uniform_int_distribution<std::size_t> pick(0, gt.size() - 1);
  for (std::size_t j = 0; j < extra; ++j) chosen.push_back(gt[pick(rng)]);

  std::vector<Gaussian3D> base;
  std::vector<Vec3> noise;
  base.reserve(chosen.size());
  for (const Source& s : chosen) {
    const ExpertModel& comp = scene.truth.components[s.component];
    Gaussian3D g = comp.gaussian_at(s.index, 0.5);
    for (int a = 0; a < 3; ++a) g.scale[a] *= std::exp(init.scale_jitter * normal(rng));
    g.color = Vec3(0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng));
    g.opacity = 0.3 + 0.4 * u(rng);
    noise.emplace_back(init.position_noise * normal(rng), init.position_noise * normal(rng),
                       init.position_noise * normal(rng));
    base.push_back(g);
  }

  auto gt_mean = [&](std::size_t j, double t) {
    return scene.truth.components[chosen[j].component].mean_at(chosen[j].index, t);
  };

  switch (kind) {
    case ExpertKind::kPolynomial: {
      ExpertModel m = ExpertModel::polynomial(base, kDefaultPolynomialDegree);
      const std::vector<double> times = train_times(scene);
      Eigen::MatrixXd vander(times.size(), m.degree() + 1);
      for (std::size_t r = 0; r < times.size(); ++r) {
        double tj = 1.0;
        for (int j = 0; j <= m.degree(); ++j) {
          vander(r, j) = tj;
          tj *= times[r];
        }
      }
      const auto qr = vander.colPivHouseholderQr();
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        Eigen::MatrixXd rhs(times.size(), 3);
        for (std::size_t r = 0; r < times.size(); ++r) rhs.row(r) = gt_mean(i, times[r]).transpose();
        const Eigen::MatrixXd coef = qr.solve(rhs);
        for (int j = 0; j <= m.degree(); ++j) {
          Vec3 a = coef.row(j).transpose();
          if (j == 0) a += noise[i];
          m.set_coefficient(static_cast<int>(i), j, a);
        }
      }
      return m;
    }
    case ExpertKind::kKeyframe: {
      ExpertModel m = ExpertModel::keyframe(base, kDefaultKeyframeCount);
      for (std::size_t i = 0; i < chosen.size(); ++i)
        for (int k = 0; k < m.keyframe_count(); ++k)
          m.set_keyframe_mean(static_cast<int>(i), k, gt_mean(i, m.keyframe_time(k)) + noise[i]);
      return m;
    }
    case ExpertKind::kDeform: {
      for (std::size_t i = 0; i < chosen.size(); ++i) base[i].mean = gt_mean(i, 0.5) + noise[i];
      return ExpertModel::deform(base, seed ^ 0x5bd1e995u);
    }
  }
  throw InvalidParameter("init_expert: unknown expert kind");
}

}  // namespace moesplat
