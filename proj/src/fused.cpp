// SPDX-License-Identifier: Apache-2.0
#include "moesplat/fused.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "moesplat/errors.hpp"

namespace moesplat {

namespace {

bool depth_less(const ChannelSplat& a, const ChannelSplat& b) {
  if (a.splat.depth != b.splat.depth) return a.splat.depth < b.splat.depth;
  return a.source < b.source;
}

}  // namespace

MergedBatch MergedBatch::build(const std::vector<std::vector<Gaussian3D>>& expert_gaussians,
                               const Camera& camera, RenderCounters* counters) {
  MergedBatch batch;
  batch.expert_count = static_cast<int>(expert_gaussians.size());
  batch.resolution = camera.resolution;
  std::size_t total = 0;
  for (const auto& g : expert_gaussians) total += g.size();
  batch.splats.reserve(total);
  for (std::size_t k = 0; k < expert_gaussians.size(); ++k) {
    auto s = project_set(camera, expert_gaussians[k], static_cast<int>(k), nullptr, nullptr);
    batch.splats.insert(batch.splats.end(), std::make_move_iterator(s.begin()),
                        std::make_move_iterator(s.end()));
  }
  if (counters) {
    ++counters->projection_passes;
    counters->splats_projected += total;
  }
  std::stable_sort(batch.splats.begin(), batch.splats.end(), depth_less);
  if (counters) ++counters->sort_passes;
  batch.sorted = true;
  return batch;
}

MergedBatch MergedBatch::build(const std::vector<ExpertModel>& experts, const View& view,
                               RenderCounters* counters) {
  std::vector<std::vector<Gaussian3D>> gs;
  gs.reserve(experts.size());
  for (const ExpertModel& e : experts) gs.push_back(e.gaussians_at(view.time));
  return build(gs, view.camera, counters);
}

void MergedBatch::append_channels(const std::vector<std::vector<double>>& values, int count) {
  if (static_cast<int>(values.size()) != expert_count || count < 0) {
    throw InvalidInput("append_channels: one value table per expert required");
  }
  for (ChannelSplat& s : splats) {
    const auto& table = values[s.source.expert];
    const std::size_t base = static_cast<std::size_t>(s.source.gaussian) * count;
    if (base + count > table.size()) throw InvalidInput("append_channels: value table too short");
    s.channels.insert(s.channels.end(), table.begin() + base, table.begin() + base + count);
  }
}

int MergedBatch::channels() const {
  return splats.empty() ? 3 : static_cast<int>(splats.front().channels.size());
}

std::vector<ImageBuffer> render_single_pass(const MergedBatch& batch, const SinglePassOptions& options,
                                            RenderCounters* counters) {
  if (batch.expert_count < 1) throw InvalidInput("render_single_pass: expert count < 1");
  if (!batch.sorted || !std::is_sorted(batch.splats.begin(), batch.splats.end(), depth_less)) {
    throw StateError("render_single_pass: batch is not depth sorted");
  }
  const Resolution res = batch.resolution;
  const int k_count = batch.expert_count;
  const int n_ch = batch.channels();
  for (const ChannelSplat& s : batch.splats) {
    if (s.source.expert < 0 || s.source.expert >= k_count) {
      throw InvalidInput("render_single_pass: expert identity out of range");
    }
    if (static_cast<int>(s.channels.size()) != n_ch) {
      throw InvalidInput("render_single_pass: splats carry differing channel counts");
    }
  }

  // The rasterizer's tile binning and compositing loop, generalized to route
  // each contribution into its expert's output.
  const int tiles_x = (res.width + kTileSize - 1) / kTileSize;
  const int tiles_y = (res.height + kTileSize - 1) / kTileSize;
  std::vector<std::vector<std::uint32_t>> tiles(static_cast<std::size_t>(tiles_x) * tiles_y);
  struct Prepared {
    double mx, my, qxx, qxy, qyy;
  };
  std::vector<Prepared> prep(batch.splats.size());
  for (std::size_t j = 0; j < batch.splats.size(); ++j) {
    const Mat2& cov = batch.splats[j].splat.cov2d;
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    if (!(det > 0.0) || !(cov(0, 0) > 0.0)) {
      throw InvalidInput("render_single_pass: 2D covariance is not positive definite");
    }
    const Vec2& m = batch.splats[j].splat.mean2d;
    prep[j] = {m.x(), m.y(), cov(1, 1) / det, -0.5 * (cov(0, 1) + cov(1, 0)) / det, cov(0, 0) / det};
    const double rx = kSupportSigma * std::sqrt(cov(0, 0));
    const double ry = kSupportSigma * std::sqrt(cov(1, 1));
    const double x0 = std::max(0.0, std::floor(m.x() - rx));
    const double x1 = std::min(res.width - 1.0, std::ceil(m.x() + rx));
    const double y0 = std::max(0.0, std::floor(m.y() - ry));
    const double y1 = std::min(res.height - 1.0, std::ceil(m.y() + ry));
    if (x0 > x1 || y0 > y1) continue;
    for (int ty = static_cast<int>(y0) / kTileSize; ty <= static_cast<int>(y1) / kTileSize; ++ty)
      for (int tx = static_cast<int>(x0) / kTileSize; tx <= static_cast<int>(x1) / kTileSize; ++tx)
        tiles[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<std::uint32_t>(j));
  }

  std::vector<ImageBuffer> out(k_count, ImageBuffer(res, n_ch));
  const int num_tiles = tiles_x * tiles_y;
  const bool independent = options.independent_transmittance;
  constexpr double kSupportSq = kSupportSigma * kSupportSigma;

#pragma omp parallel for schedule(dynamic)
  for (int tile = 0; tile < num_tiles; ++tile) {
    const int tx = tile % tiles_x;
    const int ty = tile / tiles_x;
    std::vector<double> t(k_count);
    const int ye = std::min(res.height, (ty + 1) * kTileSize);
    const int xe = std::min(res.width, (tx + 1) * kTileSize);
    for (int y = ty * kTileSize; y < ye; ++y) {
      for (int x = tx * kTileSize; x < xe; ++x) {
        std::fill(t.begin(), t.end(), 1.0);
        double shared_t = 1.0;
        int live = k_count;
        for (std::uint32_t j : tiles[tile]) {
          const ChannelSplat& s = batch.splats[j];
          const int e = s.source.expert;
          double& tj = independent ? t[e] : shared_t;
          if (independent && tj < kTransmittanceFloor) continue;
          const Prepared& p = prep[j];
          const double dx = x - p.mx;
          const double dy = y - p.my;
          const double m = p.qxx * dx * dx + 2.0 * p.qxy * dx * dy + p.qyy * dy * dy;
          if (m > kSupportSq) continue;
          const double alpha = std::min(s.opacity * std::exp(-0.5 * m), kAlphaMax);
          const double w = alpha * tj;
          auto o = out[e].pixel(y, x);
          for (int c = 0; c < n_ch; ++c) o[c] += w * s.channels[c];
          tj *= 1.0 - alpha;
          if (tj < kTransmittanceFloor) {
            if (!independent || --live == 0) break;
          }
        }
      }
    }
  }
  if (counters) ++counters->composite_passes;
  return out;
}

std::string to_string(ImportanceReduction r) {
  switch (r) {
    case ImportanceReduction::kSum: return "sum";
    case ImportanceReduction::kMean: return "mean";
    case ImportanceReduction::kFrobenius: return "frobenius";
  }
  return "unknown";
}

ImportanceReduction importance_reduction_from_string(const std::string& name) {
  if (name == "sum") return ImportanceReduction::kSum;
  if (name == "mean") return ImportanceReduction::kMean;
  if (name == "frobenius") return ImportanceReduction::kFrobenius;
  throw InvalidParameter("unknown importance reduction '" + name + "'");
}

std::size_t ImportanceTable::total() const {
  std::size_t n = 0;
  for (const auto& s : scores) n += s.size();
  return n;
}

namespace {

// sqrt(sum_u ||d G_k(u) / d [w, w_dir, t w_time]_i||^2) for every splat of expert e.
std::vector<double> frobenius_scores(const ExpertRender& render, const ImageBuffer& sensitivity,
                                     const ConvNet& phi, const ConvNet::Cache& cache) {
  const RenderGraph& graph = render.graph;
  const Resolution res = graph.resolution;
  const int pixels = res.pixels();

  // Input Jacobians of Phi for the dir (0) and time (1) planes, per output pixel.
  std::vector<std::array<double, 25>> jac_dir(pixels), jac_time(pixels);
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      jac_dir[y * res.width + x] = phi.input_jacobian(cache, y, x, 0);
      jac_time[y * res.width + x] = phi.input_jacobian(cache, y, x, 1);
    }
  }

  // Footprint a_i(v) = alpha T of every splat, grouped by splat.
  struct Hit {
    int pixel;
    double weight;
  };
  std::vector<std::vector<Hit>> footprint(graph.splats.size());
  for (int y = 0; y < res.height; ++y) {
    for (int x = 0; x < res.width; ++x) {
      for (const Contributor& c : graph.pixel_contributors(y, x)) {
        footprint[graph.splats[c.splat].input_index].push_back(
            {y * res.width + x, c.alpha * c.transmittance});
      }
    }
  }

  std::vector<double> acc_dir(pixels, 0.0), acc_time(pixels, 0.0);
  std::vector<char> touched_flag(pixels, 0);
  std::vector<int> touched;
  std::vector<double> scores(graph.splats.size(), 0.0);
  for (std::size_t s = 0; s < footprint.size(); ++s) {
    double total = 0.0;
    for (const Hit& h : footprint[s]) {
      const double sens = sensitivity.data()[h.pixel];
      total += sens * sens * h.weight * h.weight;
      const int vy = h.pixel / res.width;
      const int vx = h.pixel % res.width;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) {
          const int uy = vy - dy;
          const int ux = vx - dx;
          if (uy < 0 || uy >= res.height || ux < 0 || ux >= res.width) continue;
          const int u = uy * res.width + ux;
          // v = u + (dy, dx)
          const int tap = (dy + 2) * 5 + (dx + 2);
          acc_dir[u] += jac_dir[u][tap] * h.weight;
          acc_time[u] += jac_time[u][tap] * h.weight;
          if (!touched_flag[u]) {
            touched_flag[u] = 1;
            touched.push_back(u);
          }
        }
      }
    }
    for (int u : touched) {
      const double sens = sensitivity.data()[u];
      total += sens * sens * (acc_dir[u] * acc_dir[u] + acc_time[u] * acc_time[u]);
      acc_dir[u] = 0.0;
      acc_time[u] = 0.0;
      touched_flag[u] = 0;
    }
    touched.clear();
    scores[s] = std::sqrt(total);
  }
  return scores;
}

}  // namespace

ImportanceTable importance_scores(const MoeModel& model, const Dataset& dataset,
                                  ImportanceReduction reduction) {
  if (model.router.kind != RouterKind::kVolumeAware) {
    throw InvalidInput("importance_scores: requires a volume-aware router");
  }
  const std::vector<int> views = dataset.train_indices();
  if (views.empty()) throw InvalidInput("importance_scores: empty dataset");
  const int k_count = static_cast<int>(model.experts.size());

  ImportanceTable table;
  table.view_count = static_cast<int>(views.size());
  for (const ExpertModel& e : model.experts) table.scores.emplace_back(e.size(), 0.0);
  std::vector<double> scratch(model.router.phi.params().size());

  for (int vi : views) {
    const View& view = dataset.views[vi];
    const auto renders = render_experts(model.experts, view);
    const MoePass pass = router_forward(model.router, model.experts, renders, view);
    const Resolution res = view.camera.resolution;
    const double scale = reduction == ImportanceReduction::kMean ? 1.0 / res.pixels() : 1.0;

    for (int e = 0; e < k_count; ++e) {
      // d G_e(u) / d R'_e(u) = G_e (1 - G_e); other experts' logits carry no w_i of expert e.
      ImageBuffer sensitivity(res, 1);
      for (int y = 0; y < res.height; ++y) {
        for (int x = 0; x < res.width; ++x) {
          const double g = pass.gating.gates.at(y, x, e);
          sensitivity.at(y, x, 0) = g * (1.0 - g) * scale;
        }
      }
      const auto& splat_gaussian = renders[e].splat_gaussian;
      std::vector<double> per_splat(splat_gaussian.size(), 0.0);
      if (reduction == ImportanceReduction::kFrobenius) {
        per_splat = frobenius_scores(renders[e], sensitivity, model.router.phi,
                                     pass.volume_aware.phi[e]);
      } else {
        std::fill(scratch.begin(), scratch.end(), 0.0);
        const ImageBuffer d_in =
            model.router.phi.backward(pass.volume_aware.phi[e], sensitivity, scratch);
        ImageBuffer upstream(res, 3);
        for (int y = 0; y < res.height; ++y) {
          for (int x = 0; x < res.width; ++x) {
            upstream.at(y, x, 0) = sensitivity.at(y, x, 0);
            upstream.at(y, x, 1) = d_in.at(y, x, 0);
            upstream.at(y, x, 2) = d_in.at(y, x, 1);
          }
        }
        const std::vector<double> d_ch = channel_backward(renders[e].graph, upstream);
        for (std::size_t s = 0; s < splat_gaussian.size(); ++s) {
          per_splat[s] = std::sqrt(d_ch[3 * s] * d_ch[3 * s] + d_ch[3 * s + 1] * d_ch[3 * s + 1] +
                                   d_ch[3 * s + 2] * d_ch[3 * s + 2]);
        }
      }
      for (std::size_t s = 0; s < splat_gaussian.size(); ++s) {
        table.scores[e][splat_gaussian[s]] += per_splat[s];
      }
    }
  }
  for (auto& row : table.scores)
    for (double& v : row) v /= static_cast<double>(views.size());
  return table;
}

std::vector<std::vector<bool>> select_for_pruning(const ImportanceTable& table,
                                                  const PrunePolicy& policy) {
  std::vector<std::vector<bool>> removed;
  for (const auto& row : table.scores) removed.emplace_back(row.size(), false);

  if (policy.mode == PrunePolicy::Mode::kThreshold) {
    for (std::size_t e = 0; e < table.scores.size(); ++e)
      for (std::size_t i = 0; i < table.scores[e].size(); ++i)
        removed[e][i] = table.scores[e][i] < policy.value;
    return removed;
  }

  if (!(policy.value >= 0.0 && policy.value < 1.0)) {
    throw InvalidParameter("prune: ratio must lie in [0,1)");
  }
  return select_lowest(table, static_cast<std::size_t>(std::floor(policy.value * static_cast<double>(table.total()))));
}

std::vector<std::vector<bool>> select_lowest(const ImportanceTable& table, std::size_t count) {
  struct Entry {
    double score;
    int expert;
    int gaussian;
  };
  std::vector<Entry> all;
  std::vector<std::vector<bool>> removed;
  for (std::size_t e = 0; e < table.scores.size(); ++e) {
    removed.emplace_back(table.scores[e].size(), false);
    for (std::size_t i = 0; i < table.scores[e].size(); ++i)
      all.push_back({table.scores[e][i], static_cast<int>(e), static_cast<int>(i)});
  }
  if (count > all.size()) throw InvalidParameter("prune: more Gaussians requested than exist");
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.expert != b.expert) return a.expert < b.expert;
    return a.gaussian < b.gaussian;
  });
  for (std::size_t j = 0; j < count; ++j) removed[all[j].expert][all[j].gaussian] = true;
  return removed;
}

std::size_t bytes_per_gaussian(const ExpertModel& expert) {
  // mean, quat, scale, opacity, rgb as float32, plus motion and router triplet.
  std::size_t motion = 0;
  switch (expert.kind()) {
    case ExpertKind::kPolynomial: motion = 3 * (expert.degree() + 1); break;
    case ExpertKind::kKeyframe: motion = 3 * expert.keyframe_count(); break;
    case ExpertKind::kDeform: motion = expert.latent_dim(); break;
  }
  return 4 * (14 + motion + 3);
}

namespace {

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

}  // namespace

PruneReport prune_selected(MoeModel& model, const ImportanceTable& table,
                           const std::vector<std::vector<bool>>& removed) {
  if (removed.size() != model.experts.size() || table.scores.size() != model.experts.size()) {
    throw InvalidInput("prune: table does not cover every expert");
  }
  PruneReport report;
  report.removed = removed;
  for (std::size_t e = 0; e < model.experts.size(); ++e) {
    ExpertModel& expert = model.experts[e];
    if (removed[e].size() != static_cast<std::size_t>(expert.size()) ||
        table.scores[e].size() != static_cast<std::size_t>(expert.size())) {
      throw InvalidInput("prune: table does not cover every Gaussian");
    }
    const std::size_t per = bytes_per_gaussian(expert);
    report.bytes_before += per * expert.size();
    std::vector<bool> keep(expert.size());
    PruneReport::Row row;
    row.expert = static_cast<int>(e);
    for (int i = 0; i < expert.size(); ++i) {
      keep[i] = !removed[e][i];
      if (keep[i]) {
        ++row.kept;
      } else {
        ++row.removed;
        row.cutoff = std::max(row.cutoff, table.scores[e][i]);
      }
    }
    row.p25 = percentile(table.scores[e], 0.25);
    row.p50 = percentile(table.scores[e], 0.50);
    row.p75 = percentile(table.scores[e], 0.75);
    expert.keep_only(keep);
    model.router.keep_only(static_cast<int>(e), keep);
    report.bytes_after += per * expert.size();
    report.rows.push_back(row);
  }
  return report;
}

PruneReport prune(MoeModel& model, const ImportanceTable& table, const PrunePolicy& policy) {
  return prune_selected(model, table, select_for_pruning(table, policy));
}

std::vector<std::vector<bool>> random_pruning_selection(const std::vector<int>& counts, double rho,
                                                        std::uint64_t seed) {
  if (!(rho >= 0.0 && rho < 1.0)) throw InvalidParameter("prune: ratio must lie in [0,1)");
  std::size_t total = 0;
  for (int n : counts) total += static_cast<std::size_t>(n);
  return random_selection(counts, static_cast<std::size_t>(std::floor(rho * static_cast<double>(total))), seed);
}

std::vector<std::vector<bool>> random_selection(const std::vector<int>& counts, std::size_t count,
                                                std::uint64_t seed) {
  std::vector<std::pair<int, int>> all;
  for (std::size_t e = 0; e < counts.size(); ++e)
    for (int i = 0; i < counts[e]; ++i) all.emplace_back(static_cast<int>(e), i);
  if (count > all.size()) throw InvalidParameter("prune: more Gaussians requested than exist");
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::vector<bool>> removed;
  for (int n : counts) removed.emplace_back(n, false);
  for (std::size_t j = 0; j < count; ++j) removed[all[j].first][all[j].second] = true;
  return removed;
}

int PruneReport::total_removed() const {
  int n = 0;
  for (const Row& r : rows) n += r.removed;
  return n;
}

}  // namespace moesplat
