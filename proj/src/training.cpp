// SPDX-License-Identifier: Apache-2.0
#include "moesplat/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "moesplat/errors.hpp"

namespace moesplat {

void LossConfig::validate() const {
  if (!(lambda_ssim >= 0.0 && lambda_ssim <= 1.0)) {
    throw InvalidParameter("loss: lambda_ssim must lie in [0,1]");
  }
  ssim.validate();
}

LossResult loss(const ImageBuffer& image, const ImageBuffer& reference, const LossConfig& cfg) {
  if (!image.same_shape(reference) || image.empty()) throw InvalidInput("loss: shape mismatch");
  cfg.validate();
  const auto a = image.data();
  const auto b = reference.data();
  const double inv_n = 1.0 / static_cast<double>(a.size());
  LossResult out;
  out.grad = ImageBuffer(image.resolution(), image.channels());
  double l1 = 0.0;
  const double w1 = 1.0 - cfg.lambda_ssim;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    l1 += std::abs(d);
    out.grad.data()[i] = w1 * inv_n * static_cast<double>((d > 0.0) - (d < 0.0));
  }
  out.value = w1 * l1 * inv_n;
  if (cfg.lambda_ssim > 0.0) {
    ImageBuffer d_ssim;
    const double s = ssim_with_grad(image, reference, cfg.ssim, &d_ssim);
    out.value += cfg.lambda_ssim * (1.0 - s);
    for (std::size_t i = 0; i < a.size(); ++i) out.grad.data()[i] -= cfg.lambda_ssim * d_ssim.data()[i];
  }
  return out;
}

void OptimConfig::validate() const {
  const double rates[] = {expert.color, expert.opacity, expert.motion, router.w,
                          router.w_dir, router.w_time, router.phi, router.pixel_net,
                          router.gate_logits};
  for (double r : rates) {
    if (!(r > 0.0) || !std::isfinite(r)) throw InvalidParameter("optim: learning rates must be positive");
  }
  if (stage1_steps < 0 || stage2_steps < 0 || distill_steps < 0) {
    throw InvalidParameter("optim: step counts must be non-negative");
  }
  if (batch_views < 1) throw InvalidParameter("optim: batch_views must be >= 1");
}

void DistillConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidParameter("distill: lambda must lie in [0,1]");
}

void TrainLog::add(int step, int total, const std::string& stage, const std::string& label,
                   double loss_value, double psnr_value) {
  if (every > 1 && step % every != 0 && step != total) return;
  rows.push_back({step, stage, label, loss_value, psnr_value});
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "step,stage,label,loss,psnr\n";
  for (const TrainLogRow& r : rows) {
    os << r.step << ',' << r.stage << ',' << r.label << ',' << r.loss << ',' << r.psnr << '\n';
  }
  return os.str();
}

namespace {

std::uint64_t label_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Cycles through shuffled epochs of the train views, one batch at a time.
class ViewSampler {
 public:
  ViewSampler(std::vector<int> views, std::uint64_t seed, int batch)
      : views_(std::move(views)), rng_(seed), batch_(std::min<int>(batch, views_.size())) {
    if (views_.empty()) throw InvalidInput("training: no train views");
  }

  std::vector<int> next() {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch_) {
      if (pos_ == order_.size()) {
        order_ = views_;
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::vector<int> views_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
  int batch_;
};

const ImageBuffer& ground_truth_of(const View& view) {
  if (!view.ground_truth) throw InvalidInput("training: view has no ground truth");
  return *view.ground_truth;
}

struct ExpertGroups {
  int color = -1;
  int opacity = -1;
  int motion = -1;
};

ExpertGroups add_expert_groups(RAdam& opt, const ExpertModel& e, const ExpertLearningRates& lr,
                               const std::string& label) {
  ExpertGroups g;
  const TrainableFlags& f = e.trainable();
  if (f.color) g.color = opt.add_group(label + ".color", lr.color, e.color_logits().size());
  if (f.opacity) g.opacity = opt.add_group(label + ".opacity", lr.opacity, e.opacity_logits().size());
  if (f.motion) g.motion = opt.add_group(label + ".motion", lr.motion, e.motion().size());
  return g;
}

void apply_expert_step(RAdam& opt, const ExpertGroups& g, ExpertModel& e, const ExpertGradients& grad) {
  if (g.color >= 0) opt.step(g.color, e.color_logits(), grad.color_logits);
  if (g.opacity >= 0) opt.step(g.opacity, e.opacity_logits(), grad.opacity_logits);
  if (g.motion >= 0) opt.step(g.motion, e.motion(), grad.motion);
}

void scale_grads(ExpertGradients& g, double s) {
  for (double& v : g.color_logits) v *= s;
  for (double& v : g.opacity_logits) v *= s;
  for (double& v : g.motion) v *= s;
}

// Shared loop for ground-truth and distillation training of one expert.
template <typename LossFn>
double run_expert_training(ExpertModel& expert, const Dataset& dataset, const OptimConfig& optim,
                           int steps, const std::string& stage, const std::string& label,
                           TrainLog* log, LossFn&& loss_of) {
  optim.validate();
  if (!expert.trainable().any()) throw StateError("train: expert '" + label + "' is frozen");
  const std::vector<int> views = dataset.train_indices();
  RAdam opt(optim.radam);
  const ExpertGroups groups = add_expert_groups(opt, expert, optim.expert, label);
  ViewSampler sampler(views, optim.seed ^ label_hash(stage + "/" + label), optim.batch_views);

  for (int step = 1; step <= steps; ++step) {
    const std::vector<int> batch = sampler.next();
    std::vector<ExpertGradients> grads(batch.size());
    std::vector<double> losses(batch.size()), psnrs(batch.size());
#pragma omp parallel for schedule(static) if (batch.size() > 1)
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const View& view = dataset.views[batch[b]];
      const ExpertRender render = render_expert(expert, view);
      const LossResult l = loss_of(batch[b], render.image);
      grads[b] = expert_backward(expert, view, render, l.grad);
      losses[b] = l.value;
      psnrs[b] = psnr(render.image, ground_truth_of(view));
    }
    ExpertGradients total = grads[0];
    for (std::size_t b = 1; b < batch.size(); ++b) total.add(grads[b]);
    scale_grads(total, 1.0 / static_cast<double>(batch.size()));
    apply_expert_step(opt, groups, expert, total);
    if (log) {
      log->add(step, steps, stage, label,
               std::accumulate(losses.begin(), losses.end(), 0.0) / batch.size(),
               std::accumulate(psnrs.begin(), psnrs.end(), 0.0) / batch.size());
    }
  }

  double final_loss = 0.0;
  for (int v : views) final_loss += loss_of(v, render_expert(expert, dataset.views[v]).image).value;
  return final_loss / static_cast<double>(views.size());
}

}  // namespace

double train_expert(ExpertModel& expert, const Dataset& dataset, const OptimConfig& optim,
                    const LossConfig& loss_cfg, int steps, const std::string& label,
                    TrainLog* log) {
  loss_cfg.validate();
  return run_expert_training(expert, dataset, optim, steps, "stage1", label, log,
                             [&](int v, const ImageBuffer& img) {
                               return loss(img, ground_truth_of(dataset.views[v]), loss_cfg);
                             });
}

std::vector<double> train_stage1(std::vector<ExpertModel>& experts, const Dataset& dataset,
                                 const OptimConfig& optim, const LossConfig& loss_cfg,
                                 TrainLog* log) {
  std::vector<double> losses;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    experts[k].set_trainable({true, true, true});
    const std::string label = "expert" + std::to_string(k) + ":" + to_string(experts[k].kind());
    losses.push_back(train_expert(experts[k], dataset, optim, loss_cfg, optim.stage1_steps, label, log));
    experts[k].freeze();
  }
  return losses;
}

namespace {

struct RouterGroups {
  std::vector<int> w, w_dir, w_time;
  int phi = -1;
  int pixel_net = -1;
  std::vector<int> gate_logits;
};

RouterGroups add_router_groups(RAdam& opt, const RouterState& s, const RouterLearningRates& lr) {
  RouterGroups g;
  switch (s.kind) {
    case RouterKind::kVolumeAware:
      for (int k = 0; k < s.weights.expert_count(); ++k) {
        const auto n = s.weights.experts[k].w.size();
        const std::string p = "router" + std::to_string(k);
        g.w.push_back(opt.add_group(p + ".w", lr.w, n));
        g.w_dir.push_back(opt.add_group(p + ".w_dir", lr.w_dir, n));
        g.w_time.push_back(opt.add_group(p + ".w_time", lr.w_time, n));
      }
      g.phi = opt.add_group("router.phi", lr.phi, s.phi.params().size());
      break;
    case RouterKind::kPixel:
      g.pixel_net = opt.add_group("router.pixel_net", lr.pixel_net, s.pixel_net.params().size());
      break;
    case RouterKind::kVolume:
      for (std::size_t k = 0; k < s.gate_logits.size(); ++k) {
        g.gate_logits.push_back(
            opt.add_group("router" + std::to_string(k) + ".gate", lr.gate_logits, s.gate_logits[k].size()));
      }
      break;
  }
  return g;
}

void apply_router_step(RAdam& opt, const RouterGroups& g, RouterState& s, const RouterGradients& d) {
  switch (s.kind) {
    case RouterKind::kVolumeAware:
      for (std::size_t k = 0; k < g.w.size(); ++k) {
        opt.step(g.w[k], s.weights.experts[k].w, d.weights.experts[k].w);
        opt.step(g.w_dir[k], s.weights.experts[k].w_dir, d.weights.experts[k].w_dir);
        opt.step(g.w_time[k], s.weights.experts[k].w_time, d.weights.experts[k].w_time);
      }
      opt.step(g.phi, s.phi.params(), d.phi);
      break;
    case RouterKind::kPixel:
      opt.step(g.pixel_net, s.pixel_net.params(), d.pixel_net);
      break;
    case RouterKind::kVolume:
      for (std::size_t k = 0; k < g.gate_logits.size(); ++k) opt.step(g.gate_logits[k], s.gate_logits[k], d.gate_logits[k]);
      break;
  }
}

void scale_router_grads(RouterGradients& g, double s) {
  for (auto& e : g.weights.experts) {
    for (double& v : e.w) v *= s;
    for (double& v : e.w_dir) v *= s;
    for (double& v : e.w_time) v *= s;
  }
  for (double& v : g.phi) v *= s;
  for (double& v : g.pixel_net) v *= s;
  for (auto& e : g.gate_logits)
    for (double& v : e) v *= s;
}

}  // namespace

double train_stage2(MoeModel& model, const Dataset& dataset, const OptimConfig& optim,
                    const LossConfig& loss_cfg, int steps, TrainLog* log) {
  optim.validate();
  loss_cfg.validate();
  for (std::size_t k = 0; k < model.experts.size(); ++k) {
    if (!model.experts[k].frozen()) {
      throw StateError("stage 2: expert " + std::to_string(k) + " is not frozen");
    }
  }
  const std::vector<int> views = dataset.train_indices();
  if (views.empty()) throw InvalidInput("stage 2: no train views");

  // Frozen experts render identically every step, so each view is rendered once.
  std::vector<std::vector<ExpertRender>> cache(dataset.views.size());
  for (int v : views) cache[v] = render_experts(model.experts, dataset.views[v]);

  RAdam opt(optim.radam);
  const RouterGroups groups = add_router_groups(opt, model.router, optim.router);
  ViewSampler sampler(views, optim.seed ^ label_hash("stage2/" + to_string(model.router.kind)),
                      optim.batch_views);

  for (int step = 1; step <= steps; ++step) {
    const std::vector<int> batch = sampler.next();
    std::vector<RouterGradients> grads(batch.size());
    std::vector<double> losses(batch.size()), psnrs(batch.size());
#pragma omp parallel for schedule(static) if (batch.size() > 1)
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const View& view = dataset.views[batch[b]];
      const auto& renders = cache[batch[b]];
      const MoePass pass = router_forward(model.router, model.experts, renders, view);
      const LossResult l = loss(pass.blended, ground_truth_of(view), loss_cfg);
      grads[b] = router_backward(model.router, renders, pass, l.grad);
      losses[b] = l.value;
      psnrs[b] = psnr(pass.blended, ground_truth_of(view));
    }
    RouterGradients total = grads[0];
    for (std::size_t b = 1; b < batch.size(); ++b) total.add(grads[b]);
    scale_router_grads(total, 1.0 / static_cast<double>(batch.size()));
    apply_router_step(opt, groups, model.router, total);
    if (log) {
      log->add(step, steps, "stage2", to_string(model.router.kind),
               std::accumulate(losses.begin(), losses.end(), 0.0) / batch.size(),
               std::accumulate(psnrs.begin(), psnrs.end(), 0.0) / batch.size());
    }
  }

  double final_loss = 0.0;
  for (int v : views) {
    const MoePass pass = router_forward(model.router, model.experts, cache[v], dataset.views[v]);
    final_loss += loss(pass.blended, ground_truth_of(dataset.views[v]), loss_cfg).value;
  }
  return final_loss / static_cast<double>(views.size());
}

LossResult distill_loss(const ImageBuffer& student, const ImageBuffer& ground_truth,
                        const ImageBuffer& teacher_blend, const ImageBuffer& gate, double lambda,
                        const LossConfig& loss_cfg) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidParameter("distill: lambda must lie in [0,1]");
  if (!student.same_shape(ground_truth) || !student.same_shape(teacher_blend) ||
      gate.resolution() != student.resolution() || gate.channels() != 1) {
    throw InvalidInput("distill_loss: shape mismatch");
  }
  const int c = student.channels();
  ImageBuffer a1(student.resolution(), c), b1(student.resolution(), c);
  ImageBuffer a2(student.resolution(), c), b2(student.resolution(), c);
  for (int y = 0; y < student.height(); ++y) {
    for (int x = 0; x < student.width(); ++x) {
      const double g = gate.at(y, x, 0);
      for (int ch = 0; ch < c; ++ch) {
        a1.at(y, x, ch) = g * student.at(y, x, ch);
        b1.at(y, x, ch) = g * ground_truth.at(y, x, ch);
        a2.at(y, x, ch) = (1.0 - g) * student.at(y, x, ch);
        b2.at(y, x, ch) = (1.0 - g) * teacher_blend.at(y, x, ch);
      }
    }
  }
  LossResult out;
  out.grad = ImageBuffer(student.resolution(), c);
  if (lambda > 0.0) {
    const LossResult l = loss(a1, b1, loss_cfg);
    out.value += lambda * l.value;
    for (int y = 0; y < student.height(); ++y)
      for (int x = 0; x < student.width(); ++x)
        for (int ch = 0; ch < c; ++ch) out.grad.at(y, x, ch) += lambda * gate.at(y, x, 0) * l.grad.at(y, x, ch);
  }
  if (lambda < 1.0) {
    const LossResult l = loss(a2, b2, loss_cfg);
    out.value += (1.0 - lambda) * l.value;
    for (int y = 0; y < student.height(); ++y)
      for (int x = 0; x < student.width(); ++x)
        for (int ch = 0; ch < c; ++ch)
          out.grad.at(y, x, ch) += (1.0 - lambda) * (1.0 - gate.at(y, x, 0)) * l.grad.at(y, x, ch);
  }
  return out;
}

TeacherCache build_teacher_cache(const MoeModel& teacher, int expert, const Dataset& dataset) {
  if (expert < 0 || expert >= static_cast<int>(teacher.experts.size())) {
    throw InvalidInput("distill: teacher has no expert " + std::to_string(expert));
  }
  if (teacher.router.kind == RouterKind::kVolume) {
    throw InvalidInput("distill: the teacher router must produce a gating map");
  }
  TeacherCache cache;
  for (int v : dataset.train_indices()) {
    const MoePass pass = render_moe(teacher, dataset.views[v]);
    cache.views.push_back(v);
    cache.gate.push_back(pass.gating.gates.plane(expert));
    cache.blend.push_back(pass.blended);
  }
  return cache;
}

double distill(ExpertModel& student, const TeacherCache& teacher, const Dataset& dataset,
               const DistillConfig& cfg, const OptimConfig& optim, const LossConfig& loss_cfg,
               TrainLog* log) {
  cfg.validate();
  loss_cfg.validate();
  std::vector<int> slot(dataset.views.size(), -1);
  for (std::size_t i = 0; i < teacher.views.size(); ++i) slot.at(teacher.views[i]) = static_cast<int>(i);
  for (int v : dataset.train_indices()) {
    if (slot[v] < 0) throw InvalidInput("distill: teacher cache misses a train view");
  }
  student.set_trainable({true, true, true});
  const std::string label = "student:" + to_string(student.kind());
  const double final_loss = run_expert_training(
      student, dataset, optim, optim.distill_steps, "distill", label, log,
      [&](int v, const ImageBuffer& img) {
        const int s = slot[v];
        return distill_loss(img, ground_truth_of(dataset.views[v]), teacher.blend[s], teacher.gate[s],
                            cfg.lambda, loss_cfg);
      });
  student.freeze();
  return final_loss;
}

std::vector<PruneReport> progressive_prune(MoeModel& model, const Dataset& dataset,
                                           const ProgressivePruneConfig& cfg,
                                           const OptimConfig& optim, const LossConfig& loss_cfg,
                                           TrainLog* log) {
  if (!(cfg.ratio >= 0.0 && cfg.ratio < 1.0)) throw InvalidParameter("prune: ratio must lie in [0,1)");
  if (cfg.rounds < 1) throw InvalidParameter("prune: rounds must be >= 1");
  if (cfg.finetune_steps < 0) throw InvalidParameter("prune: fine-tune steps must be >= 0");

  std::size_t initial = 0;
  for (int n : model.gaussian_counts()) initial += static_cast<std::size_t>(n);
  const auto target = static_cast<std::size_t>(std::floor(cfg.ratio * static_cast<double>(initial)));

  std::vector<PruneReport> reports;
  std::size_t removed = 0;
  for (int round = 1; round <= cfg.rounds; ++round) {
    const std::size_t cumulative = target * round / cfg.rounds;
    const std::size_t count = cumulative - removed;
    ImportanceTable table;
    std::vector<std::vector<bool>> selection;
    if (cfg.random) {
      for (int n : model.gaussian_counts()) table.scores.emplace_back(n, 0.0);
      selection = random_selection(model.gaussian_counts(), count, cfg.random_seed + round);
    } else {
      table = importance_scores(model, dataset, cfg.reduction);
      selection = select_lowest(table, count);
    }
    reports.push_back(prune_selected(model, table, selection));
    removed = cumulative;
    if (round < cfg.rounds && cfg.finetune_steps > 0) {
      train_stage2(model, dataset, optim, loss_cfg, cfg.finetune_steps, log);
    }
  }
  return reports;
}

MoePass render_moe(const MoeModel& model, const View& view) {
  const auto renders = render_experts(model.experts, view);
  return router_forward(model.router, model.experts, renders, view);
}

namespace {

template <typename RenderFn>
EvalResult evaluate_with(const Dataset& dataset, Split split, RenderFn&& render) {
  EvalResult out;
  const std::vector<int> views = dataset.indices(split);
  if (views.empty()) throw InvalidInput("evaluate: split has no views");
  for (int v : views) {
    const View& view = dataset.views[v];
    const ImageBuffer image = render(view);
    EvalRow row;
    row.view = v;
    row.time = view.time;
    row.psnr = psnr(image, ground_truth_of(view));
    row.ssim = ssim(image, ground_truth_of(view));
    out.mean_psnr += row.psnr;
    out.mean_ssim += row.ssim;
    out.rows.push_back(row);
  }
  out.mean_psnr /= static_cast<double>(views.size());
  out.mean_ssim /= static_cast<double>(views.size());
  return out;
}

}  // namespace

EvalResult evaluate_expert(const ExpertModel& expert, const Dataset& dataset, Split split) {
  return evaluate_with(dataset, split, [&](const View& v) { return render_expert(expert, v).image; });
}

EvalResult evaluate_moe(const MoeModel& model, const Dataset& dataset, Split split) {
  return evaluate_with(dataset, split, [&](const View& v) { return render_moe(model, v).blended; });
}

EvalResult evaluate_uniform(const std::vector<ExpertModel>& experts, const Dataset& dataset,
                            Split split) {
  if (experts.empty()) throw InvalidInput("evaluate: no experts");
  return evaluate_with(dataset, split, [&](const View& v) {
    const auto renders = render_experts(experts, v);
    ImageBuffer out(renders[0].image.resolution(), renders[0].image.channels());
    const double w = 1.0 / static_cast<double>(renders.size());
    for (const ExpertRender& r : renders)
      for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += w * r.image.data()[i];
    return out;
  });
}

}  // namespace moesplat
