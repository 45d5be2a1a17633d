// SPDX-License-Identifier: Apache-2.0
//
// Small convolutional network used for pixel-space routing: two 3x3
// zero-padded convolutions with a ReLU in between (5x5 receptive field).
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "moesplat/image.hpp"

namespace moesplat {

class ConvNet {
 public:
  struct Cache {
    ImageBuffer input;
    ImageBuffer hidden_pre;  // conv1 output before ReLU
  };

  ConvNet() = default;
  /// conv1 is He-initialized from `seed`; conv2 (the output layer) is zero.
  ConvNet(int in_channels, int hidden, int out_channels, std::uint64_t seed);

  int in_channels() const { return in_; }
  int hidden() const { return hidden_; }
  int out_channels() const { return out_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  void set_params(std::vector<double> params);
  static std::size_t param_count(int in, int hidden, int out);

  ImageBuffer forward(const ImageBuffer& input, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients into `d_params`; returns d_input.
  ImageBuffer backward(const Cache& cache, const ImageBuffer& d_output,
                       std::span<double> d_params) const;

  /// d out(y, x, 0) / d input(y + dy, x + dx, channel) for dy, dx in [-2, 2],
  /// row-major over the 5x5 window (zero outside the image).
  std::array<double, 25> input_jacobian(const Cache& cache, int y, int x, int channel) const;

 private:
  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return static_cast<std::size_t>(hidden_) * in_ * 9; }
  std::size_t w2_offset() const { return b1_offset() + hidden_; }
  std::size_t b2_offset() const { return w2_offset() + static_cast<std::size_t>(out_) * hidden_ * 9; }

  int in_ = 0;
  int hidden_ = 0;
  int out_ = 0;
  std::vector<double> params_;
};

/// out = conv3x3(in) + bias with zero padding; weights laid out [o][i][ky][kx].
void conv3x3_forward(const ImageBuffer& input, std::span<const double> weights,
                     std::span<const double> bias, ImageBuffer& output);
/// Accumulates d_weights/d_bias and, when d_input is non-null, writes d_input.
void conv3x3_backward(const ImageBuffer& input, std::span<const double> weights,
                      const ImageBuffer& d_output, std::span<double> d_weights,
                      std::span<double> d_bias, ImageBuffer* d_input);

}  // namespace moesplat
