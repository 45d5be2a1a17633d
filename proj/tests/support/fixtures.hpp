// SPDX-License-Identifier: Apache-2.0
//
// Small expert and view builders shared by the unit and acceptance tests.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "moesplat/experts.hpp"
#include "moesplat/scene.hpp"
#include "support/oracles.hpp"

namespace oracle {

using moesplat::ExpertKind;
using moesplat::ExpertModel;
using moesplat::Gaussian3D;
using moesplat::View;

inline View test_view(Resolution res, double t, double azimuth = 0.2) {
  View v;
  v.camera = oracle::front_camera(res, res.width * 1.0, azimuth);
  v.time = t;
  return v;
}

inline void randomize_motion(ExpertModel& e, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  switch (e.kind()) {
    case ExpertKind::kPolynomial:
      for (int i = 0; i < e.size(); ++i) {
        for (int j = 1; j <= e.degree(); ++j) e.set_coefficient(i, j, Vec3(n(rng), n(rng), n(rng)));
      }
      break;
    case ExpertKind::kKeyframe:
      for (int i = 0; i < e.size(); ++i) {
        for (int m = 0; m < e.keyframe_count(); ++m) {
          e.set_keyframe_mean(i, m, e.keyframe_mean(i, m) + Vec3(n(rng), n(rng), n(rng)));
        }
      }
      break;
    case ExpertKind::kDeform:
      for (double& p : e.net_params()) p += n(rng);
      for (int i = 0; i < e.size(); ++i) {
        for (double& z : e.latent(i)) z = n(rng);
      }
      break;
  }
}

inline ExpertModel make_expert(ExpertKind kind, const std::vector<Gaussian3D>& base, std::uint64_t seed) {
  switch (kind) {
    case ExpertKind::kPolynomial: return ExpertModel::polynomial(base);
    case ExpertKind::kKeyframe: return ExpertModel::keyframe(base);
    case ExpertKind::kDeform: return ExpertModel::deform(base, seed);
  }
  return {};
}


}  // namespace oracle
