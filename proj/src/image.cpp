// SPDX-License-Identifier: Apache-2.0
#include "moesplat/image.hpp"

#include <algorithm>
#include <cmath>

#include "moesplat/errors.hpp"

namespace moesplat {

ImageBuffer::ImageBuffer(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels < 0) {
    throw InvalidParameter("ImageBuffer: negative dimension");
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

bool ImageBuffer::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

ImageBuffer ImageBuffer::plane(int c) const {
  if (c < 0 || c >= channels_) throw InvalidParameter("plane: channel out of range");
  ImageBuffer out(height_, width_, 1);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x) out.at(y, x, 0) = at(y, x, c);
  return out;
}

void ImageBuffer::set_plane(int c, const ImageBuffer& src) {
  if (c < 0 || c >= channels_) throw InvalidParameter("set_plane: channel out of range");
  if (src.height_ != height_ || src.width_ != width_ || src.channels_ != 1) {
    throw InvalidInput("set_plane: source must be a matching single-channel image");
  }
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x) at(y, x, c) = src.at(y, x, 0);
}

double ImageBuffer::max_abs_diff(const ImageBuffer& other) const {
  if (!same_shape(other)) throw InvalidInput("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    m = std::max(m, std::abs(data_[i] - other.data_[i]));
  }
  return m;
}

}  // namespace moesplat
