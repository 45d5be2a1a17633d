// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "moesplat/errors.hpp"
#include "moesplat/rasterizer.hpp"
#include "moesplat/scene.hpp"
#include "support/oracles.hpp"

using namespace moesplat;

TEST(Covariance, MatchesEigendecomposition) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const Quat q = Quat(n(rng), n(rng), n(rng), n(rng)).normalized();
    const Vec3 s(0.1 + std::abs(n(rng)), 0.1 + std::abs(n(rng)), 0.1 + std::abs(n(rng)));
    const Mat3 cov = covariance_from_rs(q, s);
    // The columns of R are eigenvectors with eigenvalues s^2.
    const Mat3 r = q.toRotationMatrix();
    for (int i = 0; i < 3; ++i) {
      const Vec3 v = r.col(i);
      EXPECT_NEAR((cov * v - s[i] * s[i] * v).norm(), 0.0, 1e-12);
    }
    EXPECT_NEAR((cov - cov.transpose()).norm(), 0.0, 1e-15);
  }
}

TEST(Projection, CullsBehindNearPlane) {
  const Camera cam = oracle::front_camera({32, 32}, 32.0);
  Gaussian3D g;
  g.mean = cam.position - 1.0 * (cam.orientation * Vec3(0, 0, 1));
  g.scale = Vec3::Constant(0.1);
  EXPECT_FALSE(project_gaussian(cam, g).has_value());
  g.mean = Vec3::Zero();
  EXPECT_TRUE(project_gaussian(cam, g).has_value());
}

TEST(Projection, CenterProjectsToPrincipalPointWithRegularizedCovariance) {
  const Camera cam = make_camera(Vec3::Zero(), Quat::Identity(), Vec2(50, 50), Vec2(16, 16), {32, 32}, 0.01);
  Gaussian3D g;
  g.mean = Vec3(0, 0, 5);
  g.scale = Vec3(0.1, 0.2, 0.3);
  const auto s = project_gaussian(cam, g);
  ASSERT_TRUE(s.has_value());
  EXPECT_NEAR(s->mean2d.x(), 16.0, 1e-12);
  EXPECT_NEAR(s->mean2d.y(), 16.0, 1e-12);
  EXPECT_NEAR(s->depth, 5.0, 1e-12);
  // Axis-aligned: sigma_px = f * s / z, plus the 0.3 px^2 regularizer.
  EXPECT_NEAR(s->cov2d(0, 0), std::pow(50 * 0.1 / 5, 2) + 0.3, 1e-10);
  EXPECT_NEAR(s->cov2d(1, 1), std::pow(50 * 0.2 / 5, 2) + 0.3, 1e-10);
  EXPECT_NEAR(s->cov2d(0, 1), 0.0, 1e-12);
}

TEST(Camera, LookAtKeepsWorldUpOnImageUp) {
  const Camera cam = look_at_camera(Vec3(0, 0, -4), Vec3::Zero(), Vec3(0, 1, 0), 32.0, {32, 32});
  Gaussian3D g;
  g.scale = Vec3::Constant(0.05);
  g.mean = Vec3(0, 0.5, 0);
  const auto above = project_gaussian(cam, g);
  g.mean = Vec3(0, -0.5, 0);
  const auto below = project_gaussian(cam, g);
  ASSERT_TRUE(above && below);
  EXPECT_LT(above->mean2d.y(), below->mean2d.y());
}

TEST(Rasterizer, MatchesNaiveReference) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Resolution res{40, 56};
    auto splats = oracle::random_splats(rng, 60, res, 3);
    const RasterResult r = rasterize(splats, res);
    const ImageBuffer ref = oracle::naive_rasterize(splats, res, 3);
    EXPECT_LE(r.image.max_abs_diff(ref), 1e-12) << "trial " << trial;
  }
}

TEST(Rasterizer, EmptyListIsBlack) {
  const RasterResult r = rasterize({}, {8, 8});
  EXPECT_EQ(r.image.channels(), 3);
  for (double v : r.image.data()) EXPECT_EQ(v, 0.0);
}

TEST(Rasterizer, SingleOpaqueSplatIsClampedAtCenter) {
  ChannelSplat s;
  s.splat.mean2d = Vec2(4, 4);
  s.splat.cov2d = Mat2::Identity() * 4.0;
  s.opacity = 1.0;
  s.channels = {1.0};
  const RasterResult r = rasterize(std::vector<ChannelSplat>{s}, {9, 16});
  EXPECT_NEAR(r.image.at(4, 4, 0), kAlphaMax, 1e-15);
  EXPECT_NEAR(r.image.at(4, 6, 0), std::exp(-0.5), 1e-15);
  // Mahalanobis distance 3.5 > 3: outside the support.
  EXPECT_EQ(r.image.at(4, 4 + 7, 0), 0.0);
}

TEST(Rasterizer, StopsAfterTransmittanceFloor) {
  // Ten stacked splats of alpha 0.95: T after k splats is 0.05^k, which first
  // drops below 1e-4 after the fourth, so exactly four contribute.
  std::vector<ChannelSplat> splats;
  for (int i = 0; i < 10; ++i) {
    ChannelSplat s;
    s.splat.mean2d = Vec2(0, 0);
    s.splat.cov2d = Mat2::Identity() * 100.0;
    s.splat.depth = 1.0 + i;
    s.opacity = 0.95;
    s.channels = {1.0};
    s.source = {0, i};
    splats.push_back(s);
  }
  const RasterResult r = rasterize(splats, {1, 1});
  EXPECT_EQ(r.graph.pixel_contributors(0, 0).size(), 4u);
  double expected = 0.0, t = 1.0;
  for (int i = 0; i < 4; ++i) {
    expected += t * 0.95;
    t *= 1.0 - 0.95;
  }
  EXPECT_NEAR(r.image.at(0, 0, 0), expected, 1e-15);
}

TEST(Rasterizer, ReplayReproducesImageAndChannelsAreLinear) {
  std::mt19937_64 rng(5);
  const Resolution res{24, 24};
  auto splats = oracle::random_splats(rng, 30, res, 2);
  const RasterResult r = rasterize(splats, res);
  EXPECT_LE(r.graph.replay().max_abs_diff(r.image), 1e-15);
  std::vector<double> ones(splats.size(), 1.0);
  const ImageBuffer coverage = r.graph.replay(ones, 1);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      const double t = r.graph.final_transmittance[static_cast<std::size_t>(y) * res.width + x];
      EXPECT_NEAR(coverage.at(y, x, 0), 1.0 - t, 1e-12);
    }
  }
}

TEST(Rasterizer, RejectsMixedChannelCounts) {
  std::mt19937_64 rng(1);
  auto splats = oracle::random_splats(rng, 2, {8, 8}, 3);
  splats[1].channels.push_back(0.0);
  EXPECT_THROW(rasterize(splats, {8, 8}), InvalidInput);
}

TEST(Rasterizer, RejectsNonPositiveResolution) {
  EXPECT_THROW(rasterize({}, {0, 4}), InvalidParameter);
}

TEST(RasterizerGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const Resolution res{20, 20};
  int accepted = 0;
  for (int trial = 0; trial < 40 && accepted < 10; ++trial) {
    auto splats = oracle::random_splats(rng, 6, res, 3, 0, 2.0, 5.0);
    const ImageBuffer up = oracle::random_image(rng, res, 3);
    const RasterResult base = rasterize(splats, res);
    const SplatGradients g = backward(base.graph, up);
    const auto sig = oracle::topology(base.graph);
    bool stable = true;
    auto f = [&] {
      const RasterResult r = rasterize(splats, res);
      if (oracle::topology(r.graph) != sig) stable = false;
      return oracle::dot(up, r.image);
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < splats.size(); ++i) {
      for (int c = 0; c < 3; ++c) worst = std::max(worst, oracle::rel_err(g.d_channels[3 * i + c], oracle::central_diff(&splats[i].channels[c], 1e-6, f)));
      worst = std::max(worst, oracle::rel_err(g.d_opacity[i], oracle::central_diff(&splats[i].opacity, 1e-6, f)));
      worst = std::max(worst, oracle::rel_err(g.d_mean2d[i].x(), oracle::central_diff(&splats[i].splat.mean2d.x(), 1e-5, f)));
      worst = std::max(worst, oracle::rel_err(g.d_mean2d[i].y(), oracle::central_diff(&splats[i].splat.mean2d.y(), 1e-5, f)));
    }
    if (!stable) continue;
    ++accepted;
    EXPECT_LE(worst, 1e-3) << "trial " << trial;
  }
  EXPECT_GE(accepted, 10);
}
