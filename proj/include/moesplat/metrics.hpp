// SPDX-License-Identifier: Apache-2.0
//
// Image quality metrics and expert-specialization analysis.
#pragma once

#include <vector>

#include "moesplat/image.hpp"
#include "moesplat/router.hpp"
#include "moesplat/scene.hpp"

namespace moesplat {

inline constexpr double kPsnrIdenticalSentinel = 99.0;

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;

  void validate() const;
};

/// 10 log10(1 / MSE); identical images return the 99 dB sentinel.
double psnr(const ImageBuffer& image, const ImageBuffer& reference);

/// Mean SSIM over every pixel and channel. Local statistics use a normalized
/// Gaussian window with zero padding at the borders.
double ssim(const ImageBuffer& image, const ImageBuffer& reference, const SsimConfig& cfg = {});

/// SSIM and its exact gradient with respect to `image`.
double ssim_with_grad(const ImageBuffer& image, const ImageBuffer& reference, const SsimConfig& cfg,
                      ImageBuffer* d_image);

/// Separable "same" filtering of every channel with a symmetric 1-D kernel.
ImageBuffer separable_filter(const ImageBuffer& input, const std::vector<double>& kernel);
std::vector<double> gaussian_kernel(int window, double sigma);

enum class SpecializationDenominator {
  kPositiveCount,  // number of pixels with weight > 1e-8
  kWeightSum,      // sum of the weights
};

inline constexpr double kPositiveWeightThreshold = 1e-8;

struct SpecializationRecord {
  std::vector<double> weighted_mean;  // per expert
  std::vector<double> normalized;     // divided by the maximum over experts, in [0,1]
};

/// weighted_mean_k = sum_u G_k(u) m(u) / D_k. A zero denominator yields 0.
SpecializationRecord specialization(
    const ImageBuffer& gates, const ImageBuffer& magnitude,
    SpecializationDenominator denominator = SpecializationDenominator::kPositiveCount);

/// L2 norm over channels of I_t - I_prev, where I_prev is the ground truth of
/// the closest earlier view with the same camera id. Zero map when none exists.
ImageBuffer motion_magnitude(const Dataset& dataset, int view_index);
/// Same, comparing arbitrary images.
ImageBuffer frame_difference(const ImageBuffer& current, const ImageBuffer& previous);

/// Sobel gradient magnitude of the channel-averaged luminance, edge replicated.
ImageBuffer detail_complexity(const ImageBuffer& image);

}  // namespace moesplat
