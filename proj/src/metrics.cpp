// SPDX-License-Identifier: Apache-2.0
#include "moesplat/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "moesplat/errors.hpp"

namespace moesplat {

void SsimConfig::validate() const {
  if (window < 3 || window % 2 == 0) throw InvalidParameter("ssim: window must be odd and >= 3");
  if (!(sigma > 0.0)) throw InvalidParameter("ssim: sigma must be positive");
  if (!(c1 > 0.0) || !(c2 > 0.0)) throw InvalidParameter("ssim: constants must be positive");
}

double psnr(const ImageBuffer& image, const ImageBuffer& reference) {
  if (!image.same_shape(reference) || image.empty()) {
    throw InvalidInput("psnr: shape mismatch");
  }
  const auto a = image.data();
  const auto b = reference.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.size());
  if (mse <= 0.0) return kPsnrIdenticalSentinel;
  return std::min(kPsnrIdenticalSentinel, -10.0 * std::log10(mse));
}

std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(window);
  const int r = window / 2;
  double total = 0.0;
  for (int i = 0; i < window; ++i) {
    const double x = i - r;
    k[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

ImageBuffer separable_filter(const ImageBuffer& input, const std::vector<double>& kernel) {
  const int h = input.height();
  const int w = input.width();
  const int c = input.channels();
  const int r = static_cast<int>(kernel.size()) / 2;
  ImageBuffer tmp(h, w, c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int k = -r; k <= r; ++k) {
          const int xx = x + k;
          if (xx >= 0 && xx < w) s += kernel[k + r] * input.at(y, xx, ch);
        }
        tmp.at(y, x, ch) = s;
      }
    }
  }
  ImageBuffer out(h, w, c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int k = -r; k <= r; ++k) {
          const int yy = y + k;
          if (yy >= 0 && yy < h) s += kernel[k + r] * tmp.at(yy, x, ch);
        }
        out.at(y, x, ch) = s;
      }
    }
  }
  return out;
}

double ssim_with_grad(const ImageBuffer& image, const ImageBuffer& reference, const SsimConfig& cfg,
                      ImageBuffer* d_image) {
  if (!image.same_shape(reference) || image.empty()) throw InvalidInput("ssim: shape mismatch");
  cfg.validate();
  const auto kernel = gaussian_kernel(cfg.window, cfg.sigma);
  const std::size_t n = image.size();
  const auto x = image.data();
  const auto y = reference.data();

  ImageBuffer xx(image.resolution(), image.channels());
  ImageBuffer yy(image.resolution(), image.channels());
  ImageBuffer xy(image.resolution(), image.channels());
  for (std::size_t i = 0; i < n; ++i) {
    xx.data()[i] = x[i] * x[i];
    yy.data()[i] = y[i] * y[i];
    xy.data()[i] = x[i] * y[i];
  }
  const ImageBuffer mu_x = separable_filter(image, kernel);
  const ImageBuffer mu_y = separable_filter(reference, kernel);
  const ImageBuffer e_xx = separable_filter(xx, kernel);
  const ImageBuffer e_yy = separable_filter(yy, kernel);
  const ImageBuffer e_xy = separable_filter(xy, kernel);

  ImageBuffer ds_dmu, ds_dexx, ds_dexy;
  if (d_image) {
    ds_dmu = ImageBuffer(image.resolution(), image.channels());
    ds_dexx = ImageBuffer(image.resolution(), image.channels());
    ds_dexy = ImageBuffer(image.resolution(), image.channels());
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double mx = mu_x.data()[i];
    const double my = mu_y.data()[i];
    const double sxx = e_xx.data()[i] - mx * mx;
    const double syy = e_yy.data()[i] - my * my;
    const double sxy = e_xy.data()[i] - mx * my;
    const double num1 = 2.0 * mx * my + cfg.c1;
    const double num2 = 2.0 * sxy + cfg.c2;
    const double den1 = mx * mx + my * my + cfg.c1;
    const double den2 = sxx + syy + cfg.c2;
    const double s = num1 * num2 / (den1 * den2);
    total += s;
    if (d_image) {
      ds_dexx.data()[i] = -s / den2;
      ds_dexy.data()[i] = 2.0 * num1 / (den1 * den2);
      ds_dmu.data()[i] = 2.0 * my * (num2 - num1) / (den1 * den2) -
                         s * (2.0 * mx / den1 - 2.0 * mx / den2);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (d_image) {
    // The zero-padded symmetric filter is self-adjoint.
    const ImageBuffer g_mu = separable_filter(ds_dmu, kernel);
    const ImageBuffer g_xx = separable_filter(ds_dexx, kernel);
    const ImageBuffer g_xy = separable_filter(ds_dexy, kernel);
    *d_image = ImageBuffer(image.resolution(), image.channels());
    for (std::size_t i = 0; i < n; ++i) {
      d_image->data()[i] =
          inv_n * (g_mu.data()[i] + 2.0 * x[i] * g_xx.data()[i] + y[i] * g_xy.data()[i]);
    }
  }
  return total * inv_n;
}

double ssim(const ImageBuffer& image, const ImageBuffer& reference, const SsimConfig& cfg) {
  return ssim_with_grad(image, reference, cfg, nullptr);
}

SpecializationRecord specialization(const ImageBuffer& gates, const ImageBuffer& magnitude,
                                    SpecializationDenominator denominator) {
  if (gates.resolution() != magnitude.resolution() || magnitude.channels() != 1) {
    throw InvalidInput("specialization: gating and magnitude maps disagree");
  }
  const int k_count = gates.channels();
  SpecializationRecord rec;
  rec.weighted_mean.assign(k_count, 0.0);
  for (int k = 0; k < k_count; ++k) {
    double num = 0.0;
    double den = 0.0;
    for (int y = 0; y < gates.height(); ++y) {
      for (int x = 0; x < gates.width(); ++x) {
        const double w = gates.at(y, x, k);
        num += w * magnitude.at(y, x, 0);
        if (denominator == SpecializationDenominator::kPositiveCount) {
          if (w > kPositiveWeightThreshold) den += 1.0;
        } else {
          den += w;
        }
      }
    }
    rec.weighted_mean[k] = den > 0.0 ? num / den : 0.0;
  }
  const double peak = k_count ? *std::max_element(rec.weighted_mean.begin(), rec.weighted_mean.end()) : 0.0;
  rec.normalized.resize(k_count);
  for (int k = 0; k < k_count; ++k) rec.normalized[k] = peak > 0.0 ? rec.weighted_mean[k] / peak : 0.0;
  return rec;
}

ImageBuffer frame_difference(const ImageBuffer& current, const ImageBuffer& previous) {
  if (!current.same_shape(previous)) throw InvalidInput("frame_difference: shape mismatch");
  ImageBuffer out(current.resolution(), 1);
  for (int y = 0; y < current.height(); ++y) {
    for (int x = 0; x < current.width(); ++x) {
      double s = 0.0;
      for (int c = 0; c < current.channels(); ++c) {
        const double d = current.at(y, x, c) - previous.at(y, x, c);
        s += d * d;
      }
      out.at(y, x, 0) = std::sqrt(s);
    }
  }
  return out;
}

ImageBuffer motion_magnitude(const Dataset& dataset, int view_index) {
  if (view_index < 0 || view_index >= static_cast<int>(dataset.views.size())) {
    throw InvalidParameter("motion_magnitude: view index out of range");
  }
  const View& cur = dataset.views[view_index];
  if (!cur.ground_truth) throw InvalidInput("motion_magnitude: view has no ground truth");
  const int cam = dataset.camera_id.empty() ? 0 : dataset.camera_id[view_index];
  int best = -1;
  for (int i = 0; i < static_cast<int>(dataset.views.size()); ++i) {
    if (i == view_index || !dataset.views[i].ground_truth) continue;
    if (!dataset.camera_id.empty() && dataset.camera_id[i] != cam) continue;
    if (dataset.views[i].time >= cur.time) continue;
    if (best < 0 || dataset.views[i].time > dataset.views[best].time) best = i;
  }
  if (best < 0) return ImageBuffer(cur.ground_truth->resolution(), 1);
  return frame_difference(*cur.ground_truth, *dataset.views[best].ground_truth);
}

ImageBuffer detail_complexity(const ImageBuffer& image) {
  const int h = image.height();
  const int w = image.width();
  ImageBuffer lum(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int c = 0; c < image.channels(); ++c) s += image.at(y, x, c);
      lum.at(y, x, 0) = s / image.channels();
    }
  }
  // Edge-replicated borders keep a uniform image at exactly zero response.
  auto px = [&](int y, int x) {
    return lum.at(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1), 0);
  };
  ImageBuffer out(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
      out.at(y, x, 0) = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

}  // namespace moesplat
