// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "moesplat/errors.hpp"
#include "moesplat/synth.hpp"
#include "moesplat/training.hpp"
#include "support/oracles.hpp"

using namespace moesplat;

namespace {

const SynthScene& micro_scene() {
  static const SynthScene scene = synth_scene(3, SceneSpec::micro());
  return scene;
}

OptimConfig quick_optim(int s1, int s2) {
  OptimConfig o;
  o.stage1_steps = s1;
  o.stage2_steps = s2;
  o.distill_steps = s1;
  o.seed = 3;
  return o;
}

std::vector<ExpertModel> micro_experts() {
  return {init_expert(ExpertKind::kPolynomial, micro_scene(), 31), init_expert(ExpertKind::kKeyframe, micro_scene(), 32)};
}

}  // namespace

TEST(Training, FullBatchLossDecreases) {
  OptimConfig o = quick_optim(50, 0);
  o.batch_views = static_cast<int>(micro_scene().dataset.train_indices().size());
  ExpertModel e = init_expert(ExpertKind::kKeyframe, micro_scene(), 5);
  TrainLog log;
  train_expert(e, micro_scene().dataset, o, LossConfig{}, 50, "kf", &log);
  ASSERT_EQ(log.rows.size(), 50u);
  int regressions = 0;
  for (std::size_t i = 1; i < log.rows.size(); ++i) {
    if (log.rows[i].loss > log.rows[i - 1].loss + 1e-6) ++regressions;
  }
  EXPECT_LE(regressions, 5);
  EXPECT_LT(log.rows.back().loss, log.rows.front().loss);
}

TEST(Training, Stage1FreezesAndStage2TouchesOnlyTheRouter) {
  auto experts = micro_experts();
  const OptimConfig o = quick_optim(20, 20);
  train_stage1(experts, micro_scene().dataset, o, LossConfig{});
  for (const auto& e : experts) EXPECT_TRUE(e.frozen());
  MoeModel m;
  m.experts = experts;
  m.router = RouterState::create(RouterKind::kVolumeAware, m.gaussian_counts(), 1);
  const auto router_before = m.router.parameter_bytes();
  train_stage2(m, micro_scene().dataset, o, LossConfig{}, 20);
  for (std::size_t k = 0; k < experts.size(); ++k) {
    EXPECT_EQ(m.experts[k].parameter_bytes(), experts[k].parameter_bytes());
  }
  EXPECT_NE(m.router.parameter_bytes(), router_before);
}

TEST(Training, Stage2RejectsUnfrozenExperts) {
  MoeModel m;
  m.experts = micro_experts();
  m.router = RouterState::create(RouterKind::kPixel, m.gaussian_counts(), 1);
  EXPECT_THROW(train_stage2(m, micro_scene().dataset, quick_optim(1, 1), LossConfig{}, 1), StateError);
}

TEST(Training, IsDeterministic) {
  auto a = micro_experts();
  auto b = micro_experts();
  const OptimConfig o = quick_optim(15, 10);
  train_stage1(a, micro_scene().dataset, o, LossConfig{});
  train_stage1(b, micro_scene().dataset, o, LossConfig{});
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].parameter_bytes(), b[k].parameter_bytes());
}

TEST(Distill, LossAndGradient) {
  std::mt19937_64 rng(7);
  const Resolution res{12, 12};
  ImageBuffer student = oracle::random_image(rng, res, 3, 0, 1);
  const ImageBuffer gt = oracle::random_image(rng, res, 3, 0, 1);
  const ImageBuffer teacher = oracle::random_image(rng, res, 3, 0, 1);
  const ImageBuffer gate = oracle::random_image(rng, res, 1, 0, 1);
  const LossConfig cfg;
  auto masked = [&](const ImageBuffer& img, bool inverse) {
    ImageBuffer out = img;
    for (int y = 0; y < res.height; ++y) {
      for (int x = 0; x < res.width; ++x) {
        const double g = inverse ? 1.0 - gate.at(y, x, 0) : gate.at(y, x, 0);
        for (int c = 0; c < 3; ++c) out.at(y, x, c) *= g;
      }
    }
    return out;
  };
  const double lambda = 0.3;
  const LossResult r = distill_loss(student, gt, teacher, gate, lambda, cfg);
  const double expected = lambda * loss(masked(student, false), masked(gt, false), cfg).value +
                          (1 - lambda) * loss(masked(student, true), masked(teacher, true), cfg).value;
  EXPECT_NEAR(r.value, expected, 1e-12);
  for (std::size_t i = 0; i < student.size(); i += 4) {
    const double fd = oracle::central_diff(&student.data()[i], 1e-7, [&] {
      return distill_loss(student, gt, teacher, gate, lambda, cfg).value;
    });
    EXPECT_LE(oracle::rel_err(r.grad.data()[i], fd, 1e-8), 1e-4) << i;
  }
}

TEST(Distill, TeacherMustHaveAGatingMap) {
  MoeModel m;
  m.experts = micro_experts();
  m.router = RouterState::create(RouterKind::kVolume, m.gaussian_counts(), 1);
  EXPECT_THROW(build_teacher_cache(m, 0, micro_scene().dataset), InvalidInput);
  m.router = RouterState::create(RouterKind::kPixel, m.gaussian_counts(), 1);
  EXPECT_THROW(build_teacher_cache(m, 2, micro_scene().dataset), InvalidInput);
  const TeacherCache c = build_teacher_cache(m, 1, micro_scene().dataset);
  EXPECT_EQ(c.views, micro_scene().dataset.train_indices());
}

TEST(ProgressivePrune, RemovesTheScheduledCountInBothModes) {
  auto experts = micro_experts();
  const OptimConfig o = quick_optim(10, 10);
  train_stage1(experts, micro_scene().dataset, o, LossConfig{});
  MoeModel m;
  m.experts = experts;
  m.router = RouterState::create(RouterKind::kVolumeAware, m.gaussian_counts(), 1);
  int n0 = 0;
  for (int c : m.gaussian_counts()) n0 += c;
  for (bool random : {false, true}) {
    MoeModel p = m;
    ProgressivePruneConfig cfg;
    cfg.ratio = 0.4;
    cfg.rounds = 2;
    cfg.finetune_steps = 3;
    cfg.random = random;
    const auto reports = progressive_prune(p, micro_scene().dataset, cfg, o, LossConfig{});
    ASSERT_EQ(reports.size(), 2u);
    const int target = static_cast<int>(std::floor(0.4 * n0));
    EXPECT_EQ(reports[0].total_removed(), target / 2);
    int n1 = 0;
    for (int c : p.gaussian_counts()) n1 += c;
    EXPECT_EQ(n0 - n1, target);
    for (std::size_t k = 0; k < p.experts.size(); ++k) {
      EXPECT_EQ(p.router.weights.experts[k].size(), p.experts[k].size());
    }
  }
}

TEST(Evaluate, UniformBlendIsTheMeanOfExpertImages) {
  const auto experts = micro_experts();
  const Dataset& d = micro_scene().dataset;
  const EvalResult r = evaluate_uniform(experts, d, Split::kTest);
  ASSERT_EQ(r.rows.size(), d.test_indices().size());
  const int v = d.test_indices().front();
  const ImageBuffer a = render_expert(experts[0], d.views[v]).image;
  const ImageBuffer b = render_expert(experts[1], d.views[v]).image;
  ImageBuffer mean = a;
  for (std::size_t i = 0; i < mean.size(); ++i) mean.data()[i] = 0.5 * (a.data()[i] + b.data()[i]);
  EXPECT_NEAR(r.rows.front().psnr, psnr(mean, *d.views[v].ground_truth), 1e-9);
}
