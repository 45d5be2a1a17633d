// SPDX-License-Identifier: Apache-2.0
//
// Rectified Adam with named parameter groups.
#pragma once

#include <span>
#include <string>
#include <vector>

namespace moesplat {

struct RAdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Rectified steps are taken once the variance-length estimate exceeds this.
  double rho_threshold = 5.0;
};

class RAdam {
 public:
  explicit RAdam(RAdamConfig cfg = {}) : cfg_(cfg) {}

  /// Registers a group of `size` scalars updated with learning rate `lr`.
  /// Throws InvalidParameter when lr is not positive.
  int add_group(std::string name, double lr, std::size_t size);

  /// One update of the group's parameters in place. Each group keeps its own
  /// step counter. Throws NumericalError on a non-finite gradient and
  /// InvalidInput on a size mismatch.
  void step(int group, std::span<double> params, std::span<const double> grads);

  int group_count() const { return static_cast<int>(groups_.size()); }
  long steps_taken(int group) const { return groups_.at(group).t; }
  double learning_rate(int group) const { return groups_.at(group).lr; }
  const std::string& group_name(int group) const { return groups_.at(group).name; }

 private:
  struct Group {
    std::string name;
    double lr = 0.0;
    long t = 0;
    std::vector<double> m;
    std::vector<double> v;
  };
  RAdamConfig cfg_;
  std::vector<Group> groups_;
};

}  // namespace moesplat
