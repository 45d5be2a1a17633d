// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>

#include "moesplat/errors.hpp"
#include "moesplat/io.hpp"
#include "moesplat/metrics.hpp"
#include "moesplat/pipeline.hpp"
#include "moesplat/synth.hpp"
#include "support/oracles.hpp"

using namespace moesplat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("moesplat_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kMicroConfig = R"({
  "schema_version": 1,
  "seed": 5,
  "scene": {"preset": "micro"},
  "optim": {"stage1_steps": 20, "stage2_steps": 20, "distill_steps": 10},
  "prune": {"mode": "ratio", "value": 0.4, "rounds": 2, "finetune_steps": 2}
})";

}  // namespace

TEST(Synth, IsAPureFunctionOfSeedAndSpec) {
  const SynthScene a = synth_scene(4, SceneSpec::micro());
  const SynthScene b = synth_scene(4, SceneSpec::micro());
  const SynthScene c = synth_scene(5, SceneSpec::micro());
  ASSERT_EQ(a.dataset.views.size(), 12u);
  EXPECT_EQ(a.dataset.train_indices().size(), 8u);
  EXPECT_EQ(a.spec.gaussian_count(), 50);
  bool differs = false;
  for (std::size_t v = 0; v < a.dataset.views.size(); ++v) {
    EXPECT_EQ(a.dataset.views[v].ground_truth->max_abs_diff(*b.dataset.views[v].ground_truth), 0.0);
    differs |= a.dataset.views[v].ground_truth->max_abs_diff(*c.dataset.views[v].ground_truth) > 0.0;
  }
  EXPECT_TRUE(differs);
}

TEST(Synth, GroundTruthRerendersExactly) {
  const SynthScene s = synth_scene(2, SceneSpec::micro());
  for (const View& v : s.dataset.views) {
    EXPECT_EQ(s.truth.render(v.camera, v.time).max_abs_diff(*v.ground_truth), 0.0);
  }
}

TEST(Synth, FrameDifferenceVanishesAwayFromMovingRegions) {
  const SynthScene s = synth_scene(6, SceneSpec::two_regime());
  const Dataset& d = s.dataset;
  int checked = 0;
  for (int v : d.test_indices()) {
    // Find the earlier view this magnitude compares against.
    int prev = -1;
    for (int u = 0; u < static_cast<int>(d.views.size()); ++u) {
      if (d.camera_id[u] == d.camera_id[v] && d.views[u].time < d.views[v].time &&
          (prev < 0 || d.views[u].time > d.views[prev].time)) {
        prev = u;
      }
    }
    ASSERT_GE(prev, 0);
    const ImageBuffer m = motion_magnitude(d, v);
    double moving_mass = 0.0, static_mass = 0.0;
    ImageBuffer coverage(m.height(), m.width(), 1, 0.0);
    for (int region = 1; region < 3; ++region) {
      const ImageBuffer now = s.truth.region_weight(region, d.views[v].camera, d.views[v].time);
      const ImageBuffer before = s.truth.region_weight(region, d.views[prev].camera, d.views[prev].time);
      for (std::size_t p = 0; p < coverage.size(); ++p) {
        if (now.data()[p] > 1e-3 || before.data()[p] > 1e-3) moving_mass += 1.0;
        coverage.data()[p] += now.data()[p] + before.data()[p];
      }
    }
    for (std::size_t p = 0; p < coverage.size(); ++p) {
      if (coverage.data()[p] < 1e-12) static_mass += m.data()[p];
    }
    EXPECT_GT(moving_mass, 0.0);
    EXPECT_LE(static_mass, 1e-6);
    ++checked;
  }
  EXPECT_EQ(checked, 5);
}

TEST(Synth, InitOverparameterizes) {
  const SynthScene s = synth_scene(1, SceneSpec::micro());
  for (ExpertKind k : {ExpertKind::kPolynomial, ExpertKind::kKeyframe, ExpertKind::kDeform}) {
    EXPECT_EQ(init_expert(k, s, 9).size(), 50 + 25);
  }
  const auto times = train_times(s);
  ASSERT_EQ(times.size(), 8u);
  EXPECT_DOUBLE_EQ(times.back(), 1.0);
  EXPECT_DOUBLE_EQ(times[2], 2.0 / 7.0);
}

TEST(Synth, RejectsEmptySpec) {
  SceneSpec spec = SceneSpec::micro();
  spec.regions.clear();
  EXPECT_THROW(synth_scene(1, spec), InvalidParameter);
}

TEST(Io, Sha256KnownVector) {
  const fs::path dir = scratch("sha");
  write_text(dir / "abc.txt", "abc");
  EXPECT_EQ(sha256_file(dir / "abc.txt"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  fs::remove_all(dir);
}

TEST(Io, ImageRoundTrips) {
  const fs::path dir = scratch("img");
  std::mt19937_64 rng(1);
  const ImageBuffer img = oracle::random_image(rng, {7, 9}, 3, 0, 1);
  write_f32(dir / "a.f32", img);
  const ImageBuffer f = read_f32(dir / "a.f32");
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(f.data()[i], static_cast<double>(static_cast<float>(img.data()[i])));
  write_png(dir / "a.png", img);
  EXPECT_LE(read_png(dir / "a.png").max_abs_diff(img), 0.5 / 255.0 + 1e-12);
  write_text(dir / "bad.f32", "nope");
  EXPECT_THROW(read_f32(dir / "bad.f32"), IoError);
  fs::remove_all(dir);
}

TEST(Io, CheckpointsRoundTripBitExactly) {
  const fs::path dir = scratch("ckpt");
  const SynthScene s = synth_scene(1, SceneSpec::micro());
  MoeModel m;
  m.experts = {init_expert(ExpertKind::kPolynomial, s, 1), init_expert(ExpertKind::kKeyframe, s, 2),
               init_expert(ExpertKind::kDeform, s, 3)};
  m.experts[1].freeze();
  for (RouterKind kind : {RouterKind::kVolumeAware, RouterKind::kPixel, RouterKind::kVolume}) {
    m.router = RouterState::create(kind, m.gaussian_counts(), 4);
    write_moe(dir / "m", m);
    const MoeModel back = read_moe(dir / "m");
    ASSERT_EQ(back.experts.size(), 3u);
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(back.experts[k].parameter_bytes(), m.experts[k].parameter_bytes());
      EXPECT_EQ(back.experts[k].trainable(), m.experts[k].trainable());
    }
    EXPECT_EQ(back.router.parameter_bytes(), m.router.parameter_bytes());
    EXPECT_EQ(back.router.kind, kind);
  }
  EXPECT_THROW(read_moe(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST(Io, SceneRoundTripAndStoredTruthReproducesImages) {
  const fs::path dir = scratch("scene");
  const SynthScene s = synth_scene(2, SceneSpec::micro());
  write_scene(dir, s);
  const SynthScene back = read_scene(dir);
  ASSERT_EQ(back.dataset.views.size(), s.dataset.views.size());
  EXPECT_EQ(back.dataset.split, s.dataset.split);
  EXPECT_EQ(back.dataset.camera_id, s.dataset.camera_id);
  for (std::size_t v = 0; v < s.dataset.views.size(); ++v) {
    const View& a = s.dataset.views[v];
    const View& b = back.dataset.views[v];
    EXPECT_EQ(a.time, b.time);
    EXPECT_EQ((a.camera.position - b.camera.position).norm(), 0.0);
    EXPECT_LE(b.ground_truth->max_abs_diff(*a.ground_truth), 1e-7);
    EXPECT_LE(back.truth.render(b.camera, b.time).max_abs_diff(*b.ground_truth), 1e-6);
  }
  fs::remove_all(dir);
}

TEST(Io, ManifestRoundTripAndTamperDetection) {
  const fs::path dir = scratch("manifest");
  write_text(dir / "a.txt", "one");
  write_text(dir / "sub/b.txt", "two");
  write_text(dir / ".lock", "123");
  const Manifest m = Manifest::build(dir, "synth", 9);
  ASSERT_EQ(m.files.size(), 2u);
  EXPECT_EQ(m.files[0].path, "a.txt");
  EXPECT_EQ(m.files[1].path, "sub/b.txt");
  const Manifest back = Manifest::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_TRUE(back.verify(dir));
  write_text(dir / "a.txt", "One");
  EXPECT_FALSE(back.verify(dir));
  fs::remove_all(dir);
}

TEST(Config, DefaultsAndRoundTrip) {
  const RunConfig cfg = parse_config(R"({"schema_version": 1})");
  EXPECT_EQ(cfg.router, RouterKind::kVolumeAware);
  EXPECT_EQ(cfg.experts.size(), 2u);
  EXPECT_EQ(cfg.distill.config.lambda, 0.5);
  const RunConfig micro = parse_config(kMicroConfig);
  EXPECT_EQ(micro.scene.resolution, (Resolution{32, 32}));
  EXPECT_EQ(micro.optim.seed, 5u);
  EXPECT_EQ(config_to_json(parse_config(config_to_json(micro))), config_to_json(micro));
}

TEST(Config, RejectsBadDocuments) {
  EXPECT_THROW(parse_config("{"), ConfigError);
  EXPECT_THROW(parse_config(R"({"seed": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 2})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "optim": {"stage1_step": 3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "router": "gated"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "prune": {"value": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "seed": "seven"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "experts": []})"), ConfigError);
}

TEST(Config, FlagsOverrideFileValues) {
  RunConfig cfg = parse_config(kMicroConfig);
  CommandFlags f;
  f.seed = 11;
  f.out = "elsewhere";
  f.single_pass = true;
  apply_flags(cfg, f);
  EXPECT_EQ(cfg.seed, 11u);
  EXPECT_EQ(cfg.optim.seed, 11u);
  EXPECT_EQ(cfg.output_dir, fs::path("elsewhere"));
  EXPECT_TRUE(cfg.render.single_pass);
}

TEST(Pipeline, LockIsExclusive) {
  const fs::path dir = scratch("lock");
  {
    OutputLock a(dir);
    EXPECT_THROW(OutputLock b(dir), IoError);
  }
  EXPECT_NO_THROW(OutputLock c(dir));
  fs::remove_all(dir);
}

TEST(Pipeline, ExitCodes) {
  const fs::path dir = scratch("exit");
  EXPECT_EQ(run_command("train", dir / "missing.json", {}), kExitConfig);
  write_text(dir / "c.json", kMicroConfig);
  CommandFlags f;
  f.out = dir / "out";
  EXPECT_EQ(run_command("frobnicate", dir / "c.json", f), kExitConfig);
  EXPECT_EQ(run_command("render", dir / "c.json", f), kExitData);
  ::setenv("MOESPLAT_THREADS", "zero", 1);
  EXPECT_EQ(run_command("synth", dir / "c.json", f), kExitConfig);
  ::unsetenv("MOESPLAT_THREADS");
  fs::remove_all(dir);
}

TEST(Pipeline, CommandsAreDeterministicAndSinglePassMatches) {
  const fs::path dir = scratch("pipeline");
  write_text(dir / "c.json", kMicroConfig);
  CommandFlags f;
  for (const char* out : {"a", "b"}) {
    f.out = dir / out;
    ASSERT_EQ(run_command("synth", dir / "c.json", f), kExitOk);
    ASSERT_EQ(run_command("train", dir / "c.json", f), kExitOk);
  }
  // Manifests list the same hashes, so every artifact is byte-identical.
  const Manifest a = Manifest::from_json(read_text(dir / "a/manifest.json"));
  const Manifest b = Manifest::from_json(read_text(dir / "b/manifest.json"));
  ASSERT_EQ(a.files.size(), b.files.size());
  for (std::size_t i = 0; i < a.files.size(); ++i) {
    if (a.files[i].path == "config.json") continue;  // echoes the differing output_dir
    EXPECT_EQ(a.files[i].sha256, b.files[i].sha256) << a.files[i].path;
  }
  EXPECT_FALSE(fs::exists(dir / "a/.lock"));

  f.out = dir / "a";
  f.single_pass = true;
  f.stats = true;
  ASSERT_EQ(run_command("render", dir / "c.json", f), kExitOk);
  const std::string stats = read_text(dir / "a/stats.json");
  const auto pos = stats.find("max_abs_diff_vs_multi_pass");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_LE(std::stod(stats.substr(stats.find(':', pos) + 1)), 1e-6);
  f.single_pass = false;
  f.stats = false;
  for (const char* cmd : {"eval", "prune", "distill"}) {
    f.out = dir / (std::string("a_") + cmd);
    write_text(dir / "c2.json", std::string(kMicroConfig).substr(0, std::string(kMicroConfig).rfind('}')) +
                                    ", \"checkpoint\": \"" + (dir / "a/checkpoint").string() + "\"}");
    EXPECT_EQ(run_command(cmd, dir / "c2.json", f), kExitOk) << cmd;
  }
  EXPECT_TRUE(fs::exists(dir / "a_eval/metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "a_eval/specialization.csv"));
  EXPECT_TRUE(fs::exists(dir / "a_prune/prune_report.csv"));
  EXPECT_TRUE(fs::exists(dir / "a_distill/distill_report.csv"));
  fs::remove_all(dir);
}
