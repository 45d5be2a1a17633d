// SPDX-License-Identifier: Apache-2.0
#include "moesplat/router.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "moesplat/errors.hpp"

namespace moesplat {

std::string to_string(RouterKind kind) {
  switch (kind) {
    case RouterKind::kVolumeAware: return "volume_aware";
    case RouterKind::kPixel: return "pixel";
    case RouterKind::kVolume: return "volume";
  }
  return "unknown";
}

RouterKind router_kind_from_string(const std::string& name) {
  if (name == "volume_aware") return RouterKind::kVolumeAware;
  if (name == "pixel") return RouterKind::kPixel;
  if (name == "volume") return RouterKind::kVolume;
  throw InvalidParameter("unknown router kind '" + name + "'");
}

PerGaussianWeights PerGaussianWeights::initialize(const std::vector<int>& counts,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> small(0.0, 0.01);
  PerGaussianWeights out;
  for (int n : counts) {
    ExpertWeights e;
    e.w.assign(n, 0.0);
    e.w_dir.resize(n);
    e.w_time.resize(n);
    for (int i = 0; i < n; ++i) {
      e.w_dir[i] = small(rng);
      e.w_time[i] = small(rng);
    }
    out.experts.push_back(std::move(e));
  }
  return out;
}

PerGaussianWeights PerGaussianWeights::zeros_like(const PerGaussianWeights& other) {
  PerGaussianWeights out;
  for (const ExpertWeights& e : other.experts) {
    const auto n = e.w.size();
    out.experts.push_back({std::vector<double>(n, 0.0), std::vector<double>(n, 0.0),
                           std::vector<double>(n, 0.0)});
  }
  return out;
}

GatingMap softmax_gating(ImageBuffer logits) {
  if (logits.channels() < 1) throw InvalidInput("softmax_gating: need at least one expert");
  GatingMap g;
  g.gates = ImageBuffer(logits.resolution(), logits.channels());
  const int k = logits.channels();
  for (int y = 0; y < logits.height(); ++y) {
    for (int x = 0; x < logits.width(); ++x) {
      auto r = logits.pixel(y, x);
      auto out = g.gates.pixel(y, x);
      const double m = *std::max_element(r.begin(), r.end());
      double sum = 0.0;
      for (int j = 0; j < k; ++j) {
        out[j] = std::exp(r[j] - m);
        sum += out[j];
      }
      for (int j = 0; j < k; ++j) out[j] /= sum;
    }
  }
  g.logits = std::move(logits);
  return g;
}

ImageBuffer ray_planes(const Camera& camera) {
  ImageBuffer out(camera.resolution, 3);
  for (int y = 0; y < camera.resolution.height; ++y) {
    for (int x = 0; x < camera.resolution.width; ++x) {
      const Vec3 r = pixel_ray(camera, Vec2(x, y));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = r[c];
    }
  }
  return out;
}

namespace {

std::vector<double> weight_channels(const ExpertWeights& weights, const std::vector<int>& splat_gaussian,
                                    double t) {
  std::vector<double> values(splat_gaussian.size() * 3);
  for (std::size_t s = 0; s < splat_gaussian.size(); ++s) {
    const int i = splat_gaussian[s];
    values[3 * s] = weights.w[i];
    values[3 * s + 1] = weights.w_dir[i];
    values[3 * s + 2] = t * weights.w_time[i];
  }
  return values;
}

}  // namespace

std::vector<RasterResult> splat_weights(const PerGaussianWeights& weights,
                                        const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
                                        const View& view) {
  if (weights.experts.size() != expert_gaussians.size()) {
    throw InvalidInput("splat_weights: expert count mismatch");
  }
  std::vector<RasterResult> out;
  for (std::size_t k = 0; k < expert_gaussians.size(); ++k) {
    const ExpertWeights& ew = weights.experts[k];
    const auto& gs = expert_gaussians[k];
    if (ew.w.size() != gs.size() || ew.w_dir.size() != gs.size() || ew.w_time.size() != gs.size()) {
      throw InvalidInput("splat_weights: weight triplet count does not match Gaussian count");
    }
    std::vector<int> splat_gaussian;
    auto splats = project_set(view.camera, gs, static_cast<int>(k), &splat_gaussian, nullptr);
    const auto values = weight_channels(ew, splat_gaussian, view.time);
    for (std::size_t s = 0; s < splats.size(); ++s) {
      splats[s].channels.assign(values.begin() + 3 * s, values.begin() + 3 * s + 3);
    }
    out.push_back(rasterize(splats, view.camera.resolution, 3));
  }
  return out;
}

ImageBuffer splat_weights_cached(const ExpertWeights& weights, const ExpertRender& render) {
  if (!render.valid) throw StateError("splat_weights_cached: no cached expert render");
  if (weights.size() != render.gaussian_count) {
    throw InvalidInput("splat_weights_cached: weight triplet count does not match Gaussian count");
  }
  return render.graph.replay(weight_channels(weights, render.splat_gaussian, render.time), 3);
}

GatingMap route_volume_aware(const std::vector<ImageBuffer>& planes, const View& view,
                             const ConvNet& phi, VolumeAwareCache* cache) {
  if (planes.empty()) throw InvalidInput("route_volume_aware: expert count < 1");
  const Resolution res = view.camera.resolution;
  const int k = static_cast<int>(planes.size());
  ImageBuffer rays = ray_planes(view.camera);
  ImageBuffer logits(res, k);
  if (cache) {
    cache->phi.assign(k, {});
    cache->planes = planes;
  }
  for (int e = 0; e < k; ++e) {
    const ImageBuffer& p = planes[e];
    if (p.resolution() != res || p.channels() != 3) {
      throw InvalidInput("route_volume_aware: plane shape mismatch");
    }
    ImageBuffer in(res, kRefineInputs);
    for (int y = 0; y < res.height; ++y) {
      for (int x = 0; x < res.width; ++x) {
        auto v = in.pixel(y, x);
        v[0] = p.at(y, x, 1);
        v[1] = p.at(y, x, 2);
        v[2] = rays.at(y, x, 0);
        v[3] = rays.at(y, x, 1);
        v[4] = rays.at(y, x, 2);
      }
    }
    const ImageBuffer refine = phi.forward(in, cache ? &cache->phi[e] : nullptr);
    for (int y = 0; y < res.height; ++y)
      for (int x = 0; x < res.width; ++x) logits.at(y, x, e) = p.at(y, x, 0) + refine.at(y, x, 0);
  }
  if (cache) {
    cache->rays = std::move(rays);
    cache->valid = true;
  }
  return softmax_gating(std::move(logits));
}

ImageBuffer blend(const GatingMap& gating, std::span<const ImageBuffer> expert_images) {
  const int k = gating.expert_count();
  if (static_cast<int>(expert_images.size()) != k || k < 1) {
    throw InvalidInput("blend: expert image count does not match gating map");
  }
  const Resolution res = gating.gates.resolution();
  const int channels = expert_images.front().channels();
  for (const ImageBuffer& img : expert_images) {
    if (img.resolution() != res || img.channels() != channels) {
      throw InvalidInput("blend: resolution mismatch");
    }
  }
  ImageBuffer out(res, channels);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      auto o = out.pixel(y, x);
      for (int e = 0; e < k; ++e) {
        const double g = gating.gates.at(y, x, e);
        auto src = expert_images[e].pixel(y, x);
        for (int c = 0; c < channels; ++c) o[c] += g * src[c];
      }
    }
  }
  return out;
}

ImageBuffer pixel_router_inputs(const View& view) {
  const Resolution res = view.camera.resolution;
  const ImageBuffer rays = ray_planes(view.camera);
  ImageBuffer in(res, kPixelRouterInputs);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      auto v = in.pixel(y, x);
      v[0] = res.width > 1 ? 2.0 * x / (res.width - 1) - 1.0 : 0.0;
      v[1] = res.height > 1 ? 2.0 * y / (res.height - 1) - 1.0 : 0.0;
      v[2] = view.time;
      for (int c = 0; c < 3; ++c) v[3 + c] = rays.at(y, x, c);
    }
  }
  return in;
}

GatingMap route_pixel_baseline(const View& view, const ConvNet& net, ConvNet::Cache* cache) {
  if (net.out_channels() < 1) throw InvalidInput("route_pixel_baseline: expert count < 1");
  return softmax_gating(net.forward(pixel_router_inputs(view), cache));
}

VolumeBaselineResult route_volume_baseline(
    const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
    const std::vector<std::vector<double>>& gate_logits, const View& view) {
  if (expert_gaussians.empty()) throw InvalidInput("route_volume_baseline: expert count < 1");
  if (gate_logits.size() != expert_gaussians.size()) {
    throw InvalidInput("route_volume_baseline: expert count mismatch");
  }
  const Resolution res = view.camera.resolution;
  VolumeBaselineResult r;
  r.coverage = ImageBuffer(res, 1);
  ImageBuffer sum(res, 3);
  for (std::size_t k = 0; k < expert_gaussians.size(); ++k) {
    const auto& gs = expert_gaussians[k];
    if (gate_logits[k].size() != gs.size()) {
      throw InvalidInput("route_volume_baseline: one gate logit per Gaussian required");
    }
    std::vector<int> splat_gaussian;
    auto splats = project_set(view.camera, gs, static_cast<int>(k), &splat_gaussian, nullptr);
    for (std::size_t s = 0; s < splats.size(); ++s) {
      splats[s].opacity *= sigmoid(gate_logits[k][splat_gaussian[s]]);
      splats[s].channels.push_back(1.0);
    }
    RasterResult raster = rasterize(splats, res, 4);
    ImageBuffer rgb(res, 3);
    for (int y = 0; y < res.height; ++y) {
      for (int x = 0; x < res.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          rgb.at(y, x, c) = raster.image.at(y, x, c);
          sum.at(y, x, c) += raster.image.at(y, x, c);
        }
        r.coverage.at(y, x, 0) += raster.image.at(y, x, 3);
      }
    }
    r.expert_images.push_back(std::move(rgb));
    r.rasters.push_back(std::move(raster));
    r.splat_gaussian.push_back(std::move(splat_gaussian));
  }
  r.blended = ImageBuffer(res, 3);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      const double d = std::max(1.0, r.coverage.at(y, x, 0));
      for (int c = 0; c < 3; ++c) r.blended.at(y, x, c) = sum.at(y, x, c) / d;
    }
  }
  return r;
}

std::vector<std::vector<double>> volume_baseline_backward(
    const VolumeBaselineResult& result, const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
    const std::vector<std::vector<double>>& gate_logits, const ImageBuffer& d_blended) {
  if (result.rasters.size() != expert_gaussians.size()) {
    throw StateError("volume_baseline_backward: forward result does not match experts");
  }
  const Resolution res = result.blended.resolution();
  // blended = N / D, D = max(1, S): dN = d / D, dS = -<d, blended> / D when S > 1.
  ImageBuffer upstream(res, 4);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      const double s = result.coverage.at(y, x, 0);
      const double d = std::max(1.0, s);
      double dot = 0.0;
      for (int c = 0; c < 3; ++c) {
        upstream.at(y, x, c) = d_blended.at(y, x, c) / d;
        dot += d_blended.at(y, x, c) * result.blended.at(y, x, c);
      }
      upstream.at(y, x, 3) = s > 1.0 ? -dot / d : 0.0;
    }
  }
  std::vector<std::vector<double>> grads(expert_gaussians.size());
  for (std::size_t k = 0; k < expert_gaussians.size(); ++k) {
    grads[k].assign(expert_gaussians[k].size(), 0.0);
    const SplatGradients sg = backward(result.rasters[k].graph, upstream);
    for (std::size_t s = 0; s < result.splat_gaussian[k].size(); ++s) {
      const int i = result.splat_gaussian[k][s];
      const double gate = sigmoid(gate_logits[k][i]);
      grads[k][i] += sg.d_opacity[s] * expert_gaussians[k][i].opacity * gate * (1.0 - gate);
    }
  }
  return grads;
}

RouterState RouterState::create(RouterKind kind, const std::vector<int>& gaussian_counts,
                                std::uint64_t seed) {
  if (gaussian_counts.empty()) throw InvalidInput("RouterState: expert count < 1");
  RouterState s;
  s.kind = kind;
  const int k = static_cast<int>(gaussian_counts.size());
  switch (kind) {
    case RouterKind::kVolumeAware:
      s.weights = PerGaussianWeights::initialize(gaussian_counts, seed);
      s.phi = ConvNet(kRefineInputs, kRefineHidden, 1, seed ^ 0x9e3779b97f4a7c15ULL);
      break;
    case RouterKind::kPixel:
      s.pixel_net = ConvNet(kPixelRouterInputs, kPixelRouterHidden, k, seed);
      break;
    case RouterKind::kVolume:
      for (int n : gaussian_counts) s.gate_logits.emplace_back(n, 0.0);
      break;
  }
  return s;
}

int RouterState::expert_count() const {
  switch (kind) {
    case RouterKind::kVolumeAware: return weights.expert_count();
    case RouterKind::kPixel: return pixel_net.out_channels();
    case RouterKind::kVolume: return static_cast<int>(gate_logits.size());
  }
  return 0;
}

void RouterState::keep_only(int expert, const std::vector<bool>& keep) {
  auto filter = [&keep](std::vector<double>& v) {
    if (v.size() != keep.size()) throw InvalidInput("RouterState::keep_only: mask size mismatch");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (keep[i]) out.push_back(v[i]);
    v = std::move(out);
  };
  if (kind == RouterKind::kVolumeAware) {
    ExpertWeights& e = weights.experts.at(expert);
    filter(e.w);
    filter(e.w_dir);
    filter(e.w_time);
  } else if (kind == RouterKind::kVolume) {
    filter(gate_logits.at(expert));
  }
}

std::vector<std::uint8_t> RouterState::parameter_bytes() const {
  std::vector<std::uint8_t> out;
  auto append = [&out](const std::vector<double>& v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(v.data());
    out.insert(out.end(), b, b + v.size() * sizeof(double));
  };
  out.push_back(static_cast<std::uint8_t>(kind));
  for (const ExpertWeights& e : weights.experts) {
    append(e.w);
    append(e.w_dir);
    append(e.w_time);
  }
  append(phi.params());
  append(pixel_net.params());
  for (const auto& g : gate_logits) append(g);
  return out;
}

RouterGradients RouterGradients::zeros_like(const RouterState& state) {
  RouterGradients g;
  g.weights = PerGaussianWeights::zeros_like(state.weights);
  g.phi.assign(state.phi.params().size(), 0.0);
  g.pixel_net.assign(state.pixel_net.params().size(), 0.0);
  for (const auto& v : state.gate_logits) g.gate_logits.emplace_back(v.size(), 0.0);
  return g;
}

void RouterGradients::add(const RouterGradients& other) {
  auto acc = [](std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InvalidInput("RouterGradients::add: size mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  };
  if (weights.experts.size() != other.weights.experts.size()) {
    throw InvalidInput("RouterGradients::add: expert count mismatch");
  }
  for (std::size_t k = 0; k < weights.experts.size(); ++k) {
    acc(weights.experts[k].w, other.weights.experts[k].w);
    acc(weights.experts[k].w_dir, other.weights.experts[k].w_dir);
    acc(weights.experts[k].w_time, other.weights.experts[k].w_time);
  }
  acc(phi, other.phi);
  acc(pixel_net, other.pixel_net);
  if (gate_logits.size() != other.gate_logits.size()) {
    throw InvalidInput("RouterGradients::add: expert count mismatch");
  }
  for (std::size_t k = 0; k < gate_logits.size(); ++k) acc(gate_logits[k], other.gate_logits[k]);
}

MoePass router_forward(const RouterState& state, const std::vector<ExpertModel>& experts,
                       std::span<const ExpertRender> renders, const View& view) {
  const int k = static_cast<int>(experts.size());
  if (k < 1) throw InvalidInput("router_forward: expert count < 1");
  if (static_cast<int>(renders.size()) != k || state.expert_count() != k) {
    throw InvalidInput("router_forward: expert, render and router counts differ");
  }
  for (const ExpertRender& r : renders) {
    if (!r.valid || r.time != view.time) throw StateError("router_forward: stale expert render");
  }
  MoePass pass;
  pass.kind = state.kind;
  pass.time = view.time;
  std::vector<ImageBuffer> images;
  images.reserve(k);
  for (const ExpertRender& r : renders) images.push_back(r.image);

  switch (state.kind) {
    case RouterKind::kVolumeAware: {
      std::vector<ImageBuffer> planes;
      planes.reserve(k);
      for (int e = 0; e < k; ++e) planes.push_back(splat_weights_cached(state.weights.experts[e], renders[e]));
      pass.gating = route_volume_aware(planes, view, state.phi, &pass.volume_aware);
      pass.blended = blend(pass.gating, images);
      break;
    }
    case RouterKind::kPixel:
      pass.gating = route_pixel_baseline(view, state.pixel_net, &pass.pixel);
      pass.blended = blend(pass.gating, images);
      break;
    case RouterKind::kVolume:
      pass.expert_gaussians.reserve(k);
      for (const ExpertRender& r : renders) pass.expert_gaussians.push_back(r.gaussians_at_t);
      pass.volume = route_volume_baseline(pass.expert_gaussians, state.gate_logits, view);
      pass.blended = pass.volume.blended;
      break;
  }
  pass.valid = true;
  return pass;
}

namespace {

// dL/dR'_k = G_k (dL/dG_k - sum_j G_j dL/dG_j), with dL/dG_k = <d_moe, I_Ek>.
ImageBuffer gating_logit_grad(const GatingMap& gating, std::span<const ExpertRender> renders,
                              const ImageBuffer& d_moe) {
  const Resolution res = gating.gates.resolution();
  const int k = gating.expert_count();
  ImageBuffer d_logits(res, k);
  std::vector<double> d_gate(k);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      auto d = d_moe.pixel(y, x);
      double mean = 0.0;
      for (int e = 0; e < k; ++e) {
        auto img = renders[e].image.pixel(y, x);
        double acc = 0.0;
        for (int c = 0; c < d_moe.channels(); ++c) acc += d[c] * img[c];
        d_gate[e] = acc;
        mean += gating.gates.at(y, x, e) * acc;
      }
      for (int e = 0; e < k; ++e) {
        d_logits.at(y, x, e) = gating.gates.at(y, x, e) * (d_gate[e] - mean);
      }
    }
  }
  return d_logits;
}

}  // namespace

RouterGradients router_backward(const RouterState& state, std::span<const ExpertRender> renders,
                                const MoePass& pass, const ImageBuffer& d_moe) {
  if (!pass.valid || pass.kind != state.kind) {
    throw StateError("router_backward: no forward cache for this router");
  }
  if (d_moe.resolution() != pass.blended.resolution() || d_moe.channels() != pass.blended.channels()) {
    throw InvalidInput("router_backward: gradient image shape mismatch");
  }
  RouterGradients grads = RouterGradients::zeros_like(state);
  const int k = state.expert_count();

  switch (state.kind) {
    case RouterKind::kVolumeAware: {
      if (!pass.volume_aware.valid) throw StateError("router_backward: missing splat cache");
      const ImageBuffer d_logits = gating_logit_grad(pass.gating, renders, d_moe);
      const Resolution res = d_logits.resolution();
      for (int e = 0; e < k; ++e) {
        const ImageBuffer d_r = d_logits.plane(e);
        const ImageBuffer d_in = state.phi.backward(pass.volume_aware.phi[e], d_r, grads.phi);
        ImageBuffer upstream(res, 3);
        for (int y = 0; y < res.height; ++y) {
          for (int x = 0; x < res.width; ++x) {
            upstream.at(y, x, 0) = d_r.at(y, x, 0);
            upstream.at(y, x, 1) = d_in.at(y, x, 0);
            upstream.at(y, x, 2) = d_in.at(y, x, 1);
          }
        }
        const std::vector<double> d_ch = channel_backward(renders[e].graph, upstream);
        ExpertWeights& gw = grads.weights.experts[e];
        const auto& splat_gaussian = renders[e].splat_gaussian;
        for (std::size_t s = 0; s < splat_gaussian.size(); ++s) {
          const int i = splat_gaussian[s];
          gw.w[i] += d_ch[3 * s];
          gw.w_dir[i] += d_ch[3 * s + 1];
          gw.w_time[i] += pass.time * d_ch[3 * s + 2];
        }
      }
      break;
    }
    case RouterKind::kPixel: {
      const ImageBuffer d_logits = gating_logit_grad(pass.gating, renders, d_moe);
      state.pixel_net.backward(pass.pixel, d_logits, grads.pixel_net);
      break;
    }
    case RouterKind::kVolume:
      grads.gate_logits =
          volume_baseline_backward(pass.volume, pass.expert_gaussians, state.gate_logits, d_moe);
      break;
  }
  return grads;
}

std::vector<int> MoeModel::gaussian_counts() const {
  std::vector<int> counts;
  for (const ExpertModel& e : experts) counts.push_back(e.size());
  return counts;
}

std::vector<ExpertRender> render_experts(const std::vector<ExpertModel>& experts, const View& view) {
  std::vector<ExpertRender> renders;
  renders.reserve(experts.size());
  for (std::size_t k = 0; k < experts.size(); ++k) {
    renders.push_back(render_expert(experts[k], view, static_cast<int>(k)));
  }
  return renders;
}

}  // namespace moesplat
