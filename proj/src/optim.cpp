// SPDX-License-Identifier: Apache-2.0
#include "moesplat/optim.hpp"

#include <cmath>

#include "moesplat/errors.hpp"

namespace moesplat {

int RAdam::add_group(std::string name, double lr, std::size_t size) {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw InvalidParameter("optimizer: learning rate for '" + name + "' must be positive");
  }
  Group g;
  g.name = std::move(name);
  g.lr = lr;
  g.m.assign(size, 0.0);
  g.v.assign(size, 0.0);
  groups_.push_back(std::move(g));
  return static_cast<int>(groups_.size()) - 1;
}

void RAdam::step(int group, std::span<double> params, std::span<const double> grads) {
  Group& g = groups_.at(group);
  if (params.size() != g.m.size() || grads.size() != g.m.size()) {
    throw InvalidInput("optimizer: size mismatch in group '" + g.name + "'");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericalError("optimizer: non-finite gradient in group '" + g.name + "' at index " +
                           std::to_string(i) + " (step " + std::to_string(g.t + 1) + ")");
    }
  }
  ++g.t;
  const double b1 = cfg_.beta1;
  const double b2 = cfg_.beta2;
  const double t = static_cast<double>(g.t);
  const double bias1 = 1.0 - std::pow(b1, t);
  const double b2t = std::pow(b2, t);
  const double bias2 = 1.0 - b2t;
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * b2t / bias2;
  const bool rectified = rho_t > cfg_.rho_threshold;
  double rect = 0.0;
  if (rectified) {
    rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                     ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    g.m[i] = b1 * g.m[i] + (1.0 - b1) * grads[i];
    g.v[i] = b2 * g.v[i] + (1.0 - b2) * grads[i] * grads[i];
    const double m_hat = g.m[i] / bias1;
    if (rectified) {
      const double adaptive = std::sqrt(bias2) / (std::sqrt(g.v[i]) + cfg_.eps);
      params[i] -= g.lr * m_hat * rect * adaptive;
    } else {
      params[i] -= g.lr * m_hat;
    }
  }
}

}  // namespace moesplat
