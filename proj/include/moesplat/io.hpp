// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats.
//
// Expert checkpoint (.msx): a text header terminated by "end_header", then
// one little-endian float32 record per Gaussian at t = 0 in the order
//   x y z qw qx qy qz sx sy sz opacity r g b
// followed by a motion section: kind tag byte, format version byte, trainable
// flags byte, then every parameter as float64 (rotations wxyz, scales, color
// logits, opacity logits, motion). Loading reads the float64 section, so a
// checkpoint round-trips bit-exactly; the float32 block is for other tools.
//
// Router checkpoint (.msr): "MSROUTER", version byte, kind byte, expert
// count, then per-kind float64 arrays with their lengths.
//
// Image sidecar (.f32): "MSF32\0\0\0", int32 height, width, channels, then
// HWC float32 values.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moesplat/experts.hpp"
#include "moesplat/image.hpp"
#include "moesplat/router.hpp"
#include "moesplat/synth.hpp"

namespace moesplat {

inline constexpr std::uint8_t kExpertFormatVersion = 1;
inline constexpr std::uint8_t kRouterFormatVersion = 1;
inline constexpr int kDatasetFormatVersion = 1;

/// 8-bit PNG of an image with 1, 3 or 4 channels; values are clamped to [0,1].
void write_png(const std::filesystem::path& path, const ImageBuffer& image);
/// Values scaled to [0,1].
ImageBuffer read_png(const std::filesystem::path& path);

void write_f32(const std::filesystem::path& path, const ImageBuffer& image);
ImageBuffer read_f32(const std::filesystem::path& path);

void write_expert(const std::filesystem::path& path, const ExpertModel& expert);
ExpertModel read_expert(const std::filesystem::path& path);

void write_router(const std::filesystem::path& path, const RouterState& router);
RouterState read_router(const std::filesystem::path& path);

/// Directory with expert_<k>.msx, router.msr and checkpoint.json.
void write_moe(const std::filesystem::path& dir, const MoeModel& model);
MoeModel read_moe(const std::filesystem::path& dir);

/// Directory with dataset.json, images/ (f32 + png) and truth/ (one .msx per region).
void write_scene(const std::filesystem::path& dir, const SynthScene& scene);
SynthScene read_scene(const std::filesystem::path& dir);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::uintmax_t bytes = 0;
  std::string sha256;
};

struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> files;

  /// Hashes every regular file below `dir` except the manifest itself and the lock file.
  static Manifest build(const std::filesystem::path& dir, std::string command, std::uint64_t seed);
  std::string to_json() const;
  static Manifest from_json(const std::string& text);
  /// Re-hashes each listed file; false when any is missing or changed.
  bool verify(const std::filesystem::path& dir) const;
};

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace moesplat
