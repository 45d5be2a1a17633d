// SPDX-License-Identifier: Apache-2.0
#include "moesplat/experts.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "moesplat/errors.hpp"

namespace moesplat {

std::string to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::kPolynomial: return "polynomial";
    case ExpertKind::kKeyframe: return "keyframe";
    case ExpertKind::kDeform: return "deform";
  }
  return "unknown";
}

ExpertKind expert_kind_from_string(const std::string& name) {
  if (name == "polynomial") return ExpertKind::kPolynomial;
  if (name == "keyframe") return ExpertKind::kKeyframe;
  if (name == "deform") return ExpertKind::kDeform;
  throw InvalidParameter("unknown expert kind '" + name + "'");
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) {
  const double q = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return std::log(q / (1.0 - q));
}

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidParameter("expert: time outside [0,1]");
}

void init_appearance(ExpertModel& m, const std::vector<Gaussian3D>& base) {
  for (std::size_t i = 0; i < base.size(); ++i) {
    validate(base[i]);
    m.set_color(static_cast<int>(i), base[i].color);
    m.set_opacity(static_cast<int>(i), base[i].opacity);
  }
}

}  // namespace

double ExpertModel::keyframe_time(int m) const {
  return keyframes_ <= 1 ? 0.0 : static_cast<double>(m) / (keyframes_ - 1);
}

std::size_t ExpertModel::per_gaussian_motion() const {
  switch (kind_) {
    case ExpertKind::kPolynomial: return 3 * static_cast<std::size_t>(degree_ + 1);
    case ExpertKind::kKeyframe: return 3 * static_cast<std::size_t>(keyframes_);
    case ExpertKind::kDeform: return 3 + static_cast<std::size_t>(latent_dim_);
  }
  return 0;
}

std::size_t ExpertModel::net_param_count() const {
  if (kind_ != ExpertKind::kDeform) return 0;
  const std::size_t h = hidden_;
  const std::size_t in = latent_dim_ + 1;
  return h * in + h + h * h + h + 3 * h + 3;
}

std::size_t ExpertModel::net_offset() const { return per_gaussian_motion() * size(); }

int ExpertModel::order() const {
  switch (kind_) {
    case ExpertKind::kPolynomial: return degree_;
    case ExpertKind::kKeyframe: return keyframes_;
    case ExpertKind::kDeform: return 0;
  }
  return 0;
}

ExpertModel ExpertModel::polynomial(const std::vector<Gaussian3D>& base, int degree) {
  if (degree < 1) throw InvalidParameter("polynomial expert: degree must be >= 1");
  ExpertModel m;
  m.kind_ = ExpertKind::kPolynomial;
  m.degree_ = degree;
  const std::size_t n = base.size();
  m.rotations_.reserve(n);
  m.scales_.reserve(n);
  for (const Gaussian3D& g : base) {
    m.rotations_.push_back(g.rotation);
    m.scales_.push_back(g.scale);
  }
  m.color_logits_.assign(3 * n, 0.0);
  m.opacity_logits_.assign(n, 0.0);
  m.motion_.assign(m.per_gaussian_motion() * n, 0.0);
  init_appearance(m, base);
  for (std::size_t i = 0; i < n; ++i) m.set_coefficient(static_cast<int>(i), 0, base[i].mean);
  return m;
}

ExpertModel ExpertModel::keyframe(const std::vector<Gaussian3D>& base, int keyframes) {
  if (keyframes < 2) throw InvalidParameter("keyframe expert: need at least two keyframes");
  ExpertModel m;
  m.kind_ = ExpertKind::kKeyframe;
  m.keyframes_ = keyframes;
  const std::size_t n = base.size();
  for (const Gaussian3D& g : base) {
    m.rotations_.push_back(g.rotation);
    m.scales_.push_back(g.scale);
  }
  m.color_logits_.assign(3 * n, 0.0);
  m.opacity_logits_.assign(n, 0.0);
  m.motion_.assign(m.per_gaussian_motion() * n, 0.0);
  init_appearance(m, base);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < keyframes; ++k) m.set_keyframe_mean(static_cast<int>(i), k, base[i].mean);
  return m;
}

ExpertModel ExpertModel::deform(const std::vector<Gaussian3D>& base, std::uint64_t seed,
                                int latent_dim, int hidden) {
  if (latent_dim < 1 || hidden < 1) throw InvalidParameter("deform expert: bad network shape");
  ExpertModel m;
  m.kind_ = ExpertKind::kDeform;
  m.latent_dim_ = latent_dim;
  m.hidden_ = hidden;
  const std::size_t n = base.size();
  for (const Gaussian3D& g : base) {
    m.rotations_.push_back(g.rotation);
    m.scales_.push_back(g.scale);
  }
  m.color_logits_.assign(3 * n, 0.0);
  m.opacity_logits_.assign(n, 0.0);
  m.motion_.assign(m.per_gaussian_motion() * n + m.net_param_count(), 0.0);
  init_appearance(m, base);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    m.set_base_mean(static_cast<int>(i), base[i].mean);
    for (double& e : m.latent(static_cast<int>(i))) e = unit(rng);
  }
  auto net = m.net_params();
  const std::size_t h = hidden;
  const std::size_t in = latent_dim + 1;
  const double std1 = std::sqrt(2.0 / static_cast<double>(in));
  const double std2 = std::sqrt(2.0 / static_cast<double>(h));
  std::size_t o = 0;
  for (std::size_t k = 0; k < h * in; ++k) net[o++] = std1 * unit(rng);
  o += h;  // b1
  for (std::size_t k = 0; k < h * h; ++k) net[o++] = std2 * unit(rng);
  // b2, W3 and b3 stay zero: the output layer is zero-initialized.
  return m;
}

ExpertModel ExpertModel::from_parts(ExpertKind kind, int order, int latent_dim, int hidden,
                                    std::vector<Quat> rotations, std::vector<Vec3> scales,
                                    std::vector<double> color_logits,
                                    std::vector<double> opacity_logits,
                                    std::vector<double> motion) {
  ExpertModel m;
  m.kind_ = kind;
  switch (kind) {
    case ExpertKind::kPolynomial:
      if (order < 1) throw InvalidInput("expert: polynomial degree must be >= 1");
      m.degree_ = order;
      break;
    case ExpertKind::kKeyframe:
      if (order < 2) throw InvalidInput("expert: keyframe count must be >= 2");
      m.keyframes_ = order;
      break;
    case ExpertKind::kDeform:
      if (latent_dim < 1 || hidden < 1) throw InvalidInput("expert: bad deform network shape");
      m.latent_dim_ = latent_dim;
      m.hidden_ = hidden;
      break;
  }
  const std::size_t n = rotations.size();
  m.rotations_ = std::move(rotations);
  m.scales_ = std::move(scales);
  m.color_logits_ = std::move(color_logits);
  m.opacity_logits_ = std::move(opacity_logits);
  m.motion_ = std::move(motion);
  if (m.scales_.size() != n || m.color_logits_.size() != 3 * n || m.opacity_logits_.size() != n ||
      m.motion_.size() != m.per_gaussian_motion() * n + m.net_param_count()) {
    throw InvalidInput("expert: parameter array sizes do not match Gaussian count");
  }
  // Stored rotations are already unit length up to rounding; renormalizing
  // those would perturb the last bits and break bit-exact reloads.
  for (auto& q : m.rotations_) {
    if (std::abs(q.norm() - 1.0) > 1e-9) q.normalize();
  }
  return m;
}

Vec3 ExpertModel::coefficient(int i, int j) const {
  const double* p = motion_.data() + static_cast<std::size_t>(i) * per_gaussian_motion() + 3 * j;
  return {p[0], p[1], p[2]};
}

void ExpertModel::set_coefficient(int i, int j, const Vec3& a) {
  double* p = motion_.data() + static_cast<std::size_t>(i) * per_gaussian_motion() + 3 * j;
  p[0] = a.x();
  p[1] = a.y();
  p[2] = a.z();
}

Vec3 ExpertModel::keyframe_mean(int i, int m) const { return coefficient(i, m); }
void ExpertModel::set_keyframe_mean(int i, int m, const Vec3& mean) { set_coefficient(i, m, mean); }
Vec3 ExpertModel::base_mean(int i) const { return coefficient(i, 0); }
void ExpertModel::set_base_mean(int i, const Vec3& mean) { set_coefficient(i, 0, mean); }

std::span<double> ExpertModel::latent(int i) {
  return {motion_.data() + static_cast<std::size_t>(i) * per_gaussian_motion() + 3,
          static_cast<std::size_t>(latent_dim_)};
}

std::span<double> ExpertModel::net_params() {
  return {motion_.data() + net_offset(), net_param_count()};
}
std::span<const double> ExpertModel::net_params() const {
  return {motion_.data() + net_offset(), net_param_count()};
}

void ExpertModel::set_color(int i, const Vec3& rgb) {
  for (int c = 0; c < 3; ++c) color_logits_[3 * i + c] = logit(rgb[c]);
}

void ExpertModel::set_opacity(int i, double opacity) { opacity_logits_[i] = logit(opacity); }

// Evaluates the deformation MLP for Gaussian i. When `cache` is non-null it
// receives [z0 (L+1), h1 (H), h2 (H)] for the backward pass.
Vec3 ExpertModel::deform_offset(int i, double t, std::vector<double>* cache) const {
  const int h = hidden_;
  const int in = latent_dim_ + 1;
  const double* net = motion_.data() + net_offset();
  const double* w1 = net;
  const double* b1 = w1 + h * in;
  const double* w2 = b1 + h;
  const double* b2 = w2 + h * h;
  const double* w3 = b2 + h;
  const double* b3 = w3 + 3 * h;

  std::vector<double> local;
  std::vector<double>& buf = cache ? *cache : local;
  buf.assign(in + 2 * h, 0.0);
  double* z0 = buf.data();
  double* h1 = z0 + in;
  double* h2 = h1 + h;
  const double* e = motion_.data() + static_cast<std::size_t>(i) * per_gaussian_motion() + 3;
  std::copy_n(e, latent_dim_, z0);
  z0[latent_dim_] = t;

  for (int r = 0; r < h; ++r) {
    double a = b1[r];
    for (int c = 0; c < in; ++c) a += w1[r * in + c] * z0[c];
    h1[r] = std::tanh(a);
  }
  for (int r = 0; r < h; ++r) {
    double a = b2[r];
    for (int c = 0; c < h; ++c) a += w2[r * h + c] * h1[c];
    h2[r] = std::tanh(a);
  }
  Vec3 out;
  for (int r = 0; r < 3; ++r) {
    double a = b3[r];
    for (int c = 0; c < h; ++c) a += w3[r * h + c] * h2[c];
    out[r] = a;
  }
  return out;
}

Vec3 ExpertModel::mean_at(int i, double t) const {
  check_time(t);
  switch (kind_) {
    case ExpertKind::kPolynomial: {
      Vec3 mu = Vec3::Zero();
      double tj = 1.0;
      for (int j = 0; j <= degree_; ++j) {
        mu += tj * coefficient(i, j);
        tj *= t;
      }
      return mu;
    }
    case ExpertKind::kKeyframe: {
      const double pos = t * (keyframes_ - 1);
      const int seg = std::min(static_cast<int>(std::floor(pos)), keyframes_ - 2);
      const double f = pos - seg;
      if (f == 0.0) return keyframe_mean(i, seg);
      if (f == 1.0) return keyframe_mean(i, seg + 1);
      return (1.0 - f) * keyframe_mean(i, seg) + f * keyframe_mean(i, seg + 1);
    }
    case ExpertKind::kDeform:
      return base_mean(i) + deform_offset(i, t, nullptr);
  }
  return Vec3::Zero();
}

void ExpertModel::accumulate_mean_grad(int i, double t, const Vec3& d_mean,
                                       std::span<double> d_motion) const {
  check_time(t);
  if (d_motion.size() != motion_.size()) throw InvalidInput("accumulate_mean_grad: size mismatch");
  double* g = d_motion.data() + static_cast<std::size_t>(i) * per_gaussian_motion();
  switch (kind_) {
    case ExpertKind::kPolynomial: {
      double tj = 1.0;
      for (int j = 0; j <= degree_; ++j) {
        for (int a = 0; a < 3; ++a) g[3 * j + a] += tj * d_mean[a];
        tj *= t;
      }
      return;
    }
    case ExpertKind::kKeyframe: {
      const double pos = t * (keyframes_ - 1);
      const int seg = std::min(static_cast<int>(std::floor(pos)), keyframes_ - 2);
      const double f = pos - seg;
      for (int a = 0; a < 3; ++a) {
        g[3 * seg + a] += (1.0 - f) * d_mean[a];
        g[3 * (seg + 1) + a] += f * d_mean[a];
      }
      return;
    }
    case ExpertKind::kDeform: {
      for (int a = 0; a < 3; ++a) g[a] += d_mean[a];
      std::vector<double> cache;
      deform_offset(i, t, &cache);
      const int h = hidden_;
      const int in = latent_dim_ + 1;
      const double* z0 = cache.data();
      const double* h1 = z0 + in;
      const double* h2 = h1 + h;
      const double* net = motion_.data() + net_offset();
      const double* w1 = net;
      const double* w2 = w1 + h * in + h;
      const double* w3 = w2 + h * h + h;
      double* gnet = d_motion.data() + net_offset();
      double* gw1 = gnet;
      double* gb1 = gw1 + h * in;
      double* gw2 = gb1 + h;
      double* gb2 = gw2 + h * h;
      double* gw3 = gb2 + h;
      double* gb3 = gw3 + 3 * h;

      std::vector<double> d_h2(h, 0.0), d_a2(h), d_h1(h, 0.0), d_a1(h);
      for (int r = 0; r < 3; ++r) {
        gb3[r] += d_mean[r];
        for (int c = 0; c < h; ++c) {
          gw3[r * h + c] += d_mean[r] * h2[c];
          d_h2[c] += w3[r * h + c] * d_mean[r];
        }
      }
      for (int r = 0; r < h; ++r) d_a2[r] = d_h2[r] * (1.0 - h2[r] * h2[r]);
      for (int r = 0; r < h; ++r) {
        gb2[r] += d_a2[r];
        for (int c = 0; c < h; ++c) {
          gw2[r * h + c] += d_a2[r] * h1[c];
          d_h1[c] += w2[r * h + c] * d_a2[r];
        }
      }
      for (int r = 0; r < h; ++r) d_a1[r] = d_h1[r] * (1.0 - h1[r] * h1[r]);
      double* g_latent = g + 3;
      for (int r = 0; r < h; ++r) {
        gb1[r] += d_a1[r];
        for (int c = 0; c < in; ++c) {
          gw1[r * in + c] += d_a1[r] * z0[c];
          if (c < latent_dim_) g_latent[c] += w1[r * in + c] * d_a1[r];
        }
      }
      return;
    }
  }
}

Gaussian3D ExpertModel::gaussian_at(int i, double t) const {
  Gaussian3D g;
  g.mean = mean_at(i, t);
  g.rotation = rotations_[i];
  g.scale = scales_[i];
  g.opacity = sigmoid(opacity_logits_[i]);
  g.color = Vec3(sigmoid(color_logits_[3 * i]), sigmoid(color_logits_[3 * i + 1]),
                 sigmoid(color_logits_[3 * i + 2]));
  return g;
}

std::vector<Gaussian3D> ExpertModel::gaussians_at(double t) const {
  check_time(t);
  std::vector<Gaussian3D> out;
  out.reserve(size());
  for (int i = 0; i < size(); ++i) out.push_back(gaussian_at(i, t));
  return out;
}

void ExpertModel::keep_only(const std::vector<bool>& keep) {
  if (keep.size() != static_cast<std::size_t>(size())) {
    throw InvalidInput("keep_only: mask size does not match Gaussian count");
  }
  const std::size_t pm = per_gaussian_motion();
  const std::vector<double> net(motion_.begin() + net_offset(), motion_.end());
  std::vector<Quat> rot;
  std::vector<Vec3> scl;
  std::vector<double> col, opa, mot;
  for (int i = 0; i < size(); ++i) {
    if (!keep[i]) continue;
    rot.push_back(rotations_[i]);
    scl.push_back(scales_[i]);
    col.insert(col.end(), color_logits_.begin() + 3 * i, color_logits_.begin() + 3 * i + 3);
    opa.push_back(opacity_logits_[i]);
    mot.insert(mot.end(), motion_.begin() + i * pm, motion_.begin() + (i + 1) * pm);
  }
  mot.insert(mot.end(), net.begin(), net.end());
  rotations_ = std::move(rot);
  scales_ = std::move(scl);
  color_logits_ = std::move(col);
  opacity_logits_ = std::move(opa);
  motion_ = std::move(mot);
}

std::vector<std::uint8_t> ExpertModel::parameter_bytes() const {
  std::vector<std::uint8_t> out;
  auto append = [&out](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  append(&kind_, sizeof(kind_));
  for (const Quat& q : rotations_) append(q.coeffs().data(), 4 * sizeof(double));
  for (const Vec3& s : scales_) append(s.data(), 3 * sizeof(double));
  append(color_logits_.data(), color_logits_.size() * sizeof(double));
  append(opacity_logits_.data(), opacity_logits_.size() * sizeof(double));
  append(motion_.data(), motion_.size() * sizeof(double));
  return out;
}

std::vector<ChannelSplat> project_set(const Camera& camera, const std::vector<Gaussian3D>& gaussians,
                                      int expert_index, std::vector<int>* splat_gaussian,
                                      std::vector<ProjectedGaussian>* projections) {
  std::vector<ChannelSplat> splats;
  splats.reserve(gaussians.size());
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    auto p = project_gaussian_detailed(camera, gaussians[i]);
    if (!p) continue;
    const Vec3& c = gaussians[i].color;
    splats.push_back({p->splat, {c.x(), c.y(), c.z()}, gaussians[i].opacity,
                      {expert_index, static_cast<int>(i)}});
    if (splat_gaussian) splat_gaussian->push_back(static_cast<int>(i));
    if (projections) projections->push_back(*p);
  }
  return splats;
}

ExpertRender render_expert(const ExpertModel& expert, const View& view, int expert_index) {
  ExpertRender r;
  r.time = view.time;
  r.gaussian_count = expert.size();
  r.gaussians_at_t = expert.gaussians_at(view.time);
  const auto splats =
      project_set(view.camera, r.gaussians_at_t, expert_index, &r.splat_gaussian, &r.projections);
  auto raster = rasterize(splats, view.camera.resolution, 3);
  r.image = std::move(raster.image);
  r.graph = std::move(raster.graph);
  r.valid = true;
  return r;
}

void ExpertGradients::resize_like(const ExpertModel& expert) {
  color_logits.assign(expert.color_logits().size(), 0.0);
  opacity_logits.assign(expert.opacity_logits().size(), 0.0);
  motion.assign(expert.motion().size(), 0.0);
}

void ExpertGradients::add(const ExpertGradients& other) {
  auto acc = [](std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InvalidInput("ExpertGradients::add: size mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  };
  acc(color_logits, other.color_logits);
  acc(opacity_logits, other.opacity_logits);
  acc(motion, other.motion);
}

ExpertGradients expert_backward(const ExpertModel& expert, const View& view,
                                const ExpertRender& render, const ImageBuffer& d_image) {
  if (!render.valid) throw StateError("expert_backward: no cached render for this view");
  if (render.gaussian_count != expert.size() || render.time != view.time ||
      render.graph.resolution != view.camera.resolution) {
    throw StateError("expert_backward: cached render does not match expert/view");
  }
  const SplatGradients sg = backward(render.graph, d_image);

  ExpertGradients out;
  out.resize_like(expert);
  for (std::size_t s = 0; s < render.splat_gaussian.size(); ++s) {
    const int i = render.splat_gaussian[s];
    const Gaussian3D& g = render.gaussians_at_t[i];
    for (int c = 0; c < 3; ++c) {
      const double v = g.color[c];
      out.color_logits[3 * i + c] += sg.d_channels[3 * s + c] * v * (1.0 - v);
    }
    out.opacity_logits[i] += sg.d_opacity[s] * g.opacity * (1.0 - g.opacity);
    const Vec3 d_mean =
        project_mean_backward(view.camera, render.projections[s], sg.d_mean2d[s], sg.d_cov2d[s]);
    expert.accumulate_mean_grad(i, view.time, d_mean, out.motion);
  }
  return out;
}

}  // namespace moesplat
