// SPDX-License-Identifier: Apache-2.0
//
// Toy dynamic-Gaussian experts. Each expert owns a static set of Gaussian
// shapes (rotation, scale) plus trainable color/opacity logits and a
// kind-specific motion model for the means:
//
//   polynomial  mu(t) = sum_j a_j t^j
//   keyframe    mu(t) = linear interpolation between M keyframe means
//   deform      mu(t) = mu_base + net(e_i, t), a shared tanh MLP per expert
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moesplat/rasterizer.hpp"
#include "moesplat/scene.hpp"

namespace moesplat {

enum class ExpertKind : std::uint8_t { kPolynomial = 0, kKeyframe = 1, kDeform = 2 };

std::string to_string(ExpertKind kind);
ExpertKind expert_kind_from_string(const std::string& name);

inline constexpr int kDefaultPolynomialDegree = 2;
inline constexpr int kDefaultKeyframeCount = 5;
inline constexpr int kDefaultLatentDim = 8;
inline constexpr int kDefaultDeformHidden = 16;

struct TrainableFlags {
  bool color = true;
  bool opacity = true;
  bool motion = true;

  bool any() const { return color || opacity || motion; }
  bool operator==(const TrainableFlags&) const = default;
};

double sigmoid(double x);
double logit(double p);

class ExpertModel {
 public:
  ExpertModel() = default;

  /// Coefficients start at a_0 = base mean, a_{j>0} = 0.
  static ExpertModel polynomial(const std::vector<Gaussian3D>& base,
                                int degree = kDefaultPolynomialDegree);
  /// Keyframe times are evenly spaced over [0,1]; every keyframe starts at the base mean.
  static ExpertModel keyframe(const std::vector<Gaussian3D>& base,
                              int keyframes = kDefaultKeyframeCount);
  /// Hidden layers are He-initialized from `seed`; the output layer is zero so
  /// the expert starts static at the base means.
  static ExpertModel deform(const std::vector<Gaussian3D>& base, std::uint64_t seed,
                            int latent_dim = kDefaultLatentDim, int hidden = kDefaultDeformHidden);

  ExpertKind kind() const { return kind_; }
  int size() const { return static_cast<int>(rotations_.size()); }
  int degree() const { return degree_; }
  int keyframe_count() const { return keyframes_; }
  int latent_dim() const { return latent_dim_; }
  int hidden() const { return hidden_; }
  double keyframe_time(int m) const;

  Vec3 mean_at(int i, double t) const;
  std::vector<Gaussian3D> gaussians_at(double t) const;
  Gaussian3D gaussian_at(int i, double t) const;

  /// d_motion += (d mu_i(t) / d motion)^T d_mean.
  void accumulate_mean_grad(int i, double t, const Vec3& d_mean, std::span<double> d_motion) const;

  // Trainable groups; colors/opacities are stored as logits.
  std::vector<double>& color_logits() { return color_logits_; }
  const std::vector<double>& color_logits() const { return color_logits_; }
  std::vector<double>& opacity_logits() { return opacity_logits_; }
  const std::vector<double>& opacity_logits() const { return opacity_logits_; }
  std::vector<double>& motion() { return motion_; }
  const std::vector<double>& motion() const { return motion_; }

  const std::vector<Quat>& rotations() const { return rotations_; }
  const std::vector<Vec3>& scales() const { return scales_; }

  // Polynomial coefficient a_j of Gaussian i.
  Vec3 coefficient(int i, int j) const;
  void set_coefficient(int i, int j, const Vec3& a);
  // Keyframe mean m of Gaussian i.
  Vec3 keyframe_mean(int i, int m) const;
  void set_keyframe_mean(int i, int m, const Vec3& mean);
  // Deform canonical mean and latent.
  Vec3 base_mean(int i) const;
  void set_base_mean(int i, const Vec3& mean);
  std::span<double> latent(int i);
  std::span<double> net_params();
  std::span<const double> net_params() const;

  void set_color(int i, const Vec3& rgb);
  void set_opacity(int i, double opacity);

  const TrainableFlags& trainable() const { return trainable_; }
  void set_trainable(const TrainableFlags& flags) { trainable_ = flags; }
  bool frozen() const { return !trainable_.any(); }
  void freeze() { trainable_ = {false, false, false}; }

  /// Drops every Gaussian whose `keep` entry is false.
  void keep_only(const std::vector<bool>& keep);

  /// Raw bytes of every parameter, for bit-level comparisons.
  std::vector<std::uint8_t> parameter_bytes() const;

  /// Assembles a model from serialized parts; validates layout sizes.
  static ExpertModel from_parts(ExpertKind kind, int order, int latent_dim, int hidden,
                                std::vector<Quat> rotations, std::vector<Vec3> scales,
                                std::vector<double> color_logits,
                                std::vector<double> opacity_logits, std::vector<double> motion);
  /// Kind-specific order: polynomial degree, keyframe count, or 0 for deform.
  int order() const;

 private:
  std::size_t per_gaussian_motion() const;
  std::size_t net_param_count() const;
  std::size_t net_offset() const;
  Vec3 deform_offset(int i, double t, std::vector<double>* cache) const;

  ExpertKind kind_ = ExpertKind::kPolynomial;
  int degree_ = 0;
  int keyframes_ = 0;
  int latent_dim_ = 0;
  int hidden_ = 0;
  std::vector<Quat> rotations_;
  std::vector<Vec3> scales_;
  std::vector<double> color_logits_;    // 3 per Gaussian
  std::vector<double> opacity_logits_;  // 1 per Gaussian
  std::vector<double> motion_;
  TrainableFlags trainable_;
};

/// One expert's render of one view, with everything backward() needs.
struct ExpertRender {
  ImageBuffer image;
  RenderGraph graph;
  std::vector<Gaussian3D> gaussians_at_t;
  std::vector<int> splat_gaussian;  // splat input index -> Gaussian index
  std::vector<ProjectedGaussian> projections;  // per splat
  double time = 0.0;
  int gaussian_count = 0;
  bool valid = false;
};

/// Splats for the visible Gaussians of a set, colored by `channels_of`.
/// Fills `splat_gaussian`/`projections` when non-null.
std::vector<ChannelSplat> project_set(const Camera& camera, const std::vector<Gaussian3D>& gaussians,
                                      int expert_index, std::vector<int>* splat_gaussian,
                                      std::vector<ProjectedGaussian>* projections);

ExpertRender render_expert(const ExpertModel& expert, const View& view, int expert_index = 0);

struct ExpertGradients {
  std::vector<double> color_logits;
  std::vector<double> opacity_logits;
  std::vector<double> motion;

  void resize_like(const ExpertModel& expert);
  void add(const ExpertGradients& other);
};

/// Gradients of sum_u <d_image(u), render(u)> for the render cached in
/// `render`. Throws StateError when the cache is missing or stale.
ExpertGradients expert_backward(const ExpertModel& expert, const View& view,
                                const ExpertRender& render, const ImageBuffer& d_image);

}  // namespace moesplat
