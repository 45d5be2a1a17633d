// SPDX-License-Identifier: Apache-2.0
#include "moesplat/nn.hpp"

#include <cmath>
#include <random>

#include "moesplat/errors.hpp"

namespace moesplat {

void conv3x3_forward(const ImageBuffer& input, std::span<const double> weights,
                     std::span<const double> bias, ImageBuffer& output) {
  const int h = input.height();
  const int w = input.width();
  const int in = input.channels();
  const int out = output.channels();
  if (weights.size() != static_cast<std::size_t>(out) * in * 9 || bias.size() != static_cast<std::size_t>(out)) {
    throw InvalidInput("conv3x3_forward: parameter size mismatch");
  }
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto o = output.pixel(y, x);
      for (int k = 0; k < out; ++k) o[k] = bias[k];
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= w) continue;
          auto src = input.pixel(sy, sx);
          const int tap = ky * 3 + kx;
          for (int k = 0; k < out; ++k) {
            const double* wk = weights.data() + static_cast<std::size_t>(k) * in * 9 + tap;
            double acc = 0.0;
            for (int c = 0; c < in; ++c) acc += wk[c * 9] * src[c];
            o[k] += acc;
          }
        }
      }
    }
  }
}

void conv3x3_backward(const ImageBuffer& input, std::span<const double> weights,
                      const ImageBuffer& d_output, std::span<double> d_weights,
                      std::span<double> d_bias, ImageBuffer* d_input) {
  const int h = input.height();
  const int w = input.width();
  const int in = input.channels();
  const int out = d_output.channels();
  if (d_input) *d_input = ImageBuffer(h, w, in);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto g = d_output.pixel(y, x);
      for (int k = 0; k < out; ++k) d_bias[k] += g[k];
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= w) continue;
          auto src = input.pixel(sy, sx);
          const int tap = ky * 3 + kx;
          for (int k = 0; k < out; ++k) {
            const double gk = g[k];
            if (gk == 0.0) continue;
            double* dw = d_weights.data() + static_cast<std::size_t>(k) * in * 9 + tap;
            const double* wk = weights.data() + static_cast<std::size_t>(k) * in * 9 + tap;
            for (int c = 0; c < in; ++c) dw[c * 9] += gk * src[c];
            if (d_input) {
              auto di = d_input->pixel(sy, sx);
              for (int c = 0; c < in; ++c) di[c] += gk * wk[c * 9];
            }
          }
        }
      }
    }
  }
}

std::size_t ConvNet::param_count(int in, int hidden, int out) {
  return static_cast<std::size_t>(hidden) * in * 9 + hidden + static_cast<std::size_t>(out) * hidden * 9 + out;
}

ConvNet::ConvNet(int in_channels, int hidden, int out_channels, std::uint64_t seed)
    : in_(in_channels), hidden_(hidden), out_(out_channels) {
  if (in_ <= 0 || hidden_ <= 0 || out_ <= 0) throw InvalidParameter("ConvNet: bad shape");
  params_.assign(param_count(in_, hidden_, out_), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> he(0.0, std::sqrt(2.0 / (9.0 * in_)));
  for (std::size_t i = 0; i < b1_offset(); ++i) params_[w1_offset() + i] = he(rng);
}

void ConvNet::set_params(std::vector<double> params) {
  if (params.size() != params_.size()) throw InvalidInput("ConvNet::set_params: size mismatch");
  params_ = std::move(params);
}

ImageBuffer ConvNet::forward(const ImageBuffer& input, Cache* cache) const {
  if (input.channels() != in_) throw InvalidInput("ConvNet::forward: channel mismatch");
  std::span<const double> p(params_);
  ImageBuffer pre(input.resolution(), hidden_);
  conv3x3_forward(input, p.subspan(w1_offset(), b1_offset()), p.subspan(b1_offset(), hidden_), pre);
  ImageBuffer act = pre;
  for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
  ImageBuffer out(input.resolution(), out_);
  conv3x3_forward(act, p.subspan(w2_offset(), b2_offset() - w2_offset()), p.subspan(b2_offset(), out_), out);
  if (cache) {
    cache->input = input;
    cache->hidden_pre = std::move(pre);
  }
  return out;
}

ImageBuffer ConvNet::backward(const Cache& cache, const ImageBuffer& d_output,
                              std::span<double> d_params) const {
  if (d_params.size() != params_.size()) throw InvalidInput("ConvNet::backward: gradient size mismatch");
  if (cache.input.empty()) throw StateError("ConvNet::backward: missing forward cache");
  std::span<const double> p(params_);
  ImageBuffer act = cache.hidden_pre;
  for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
  ImageBuffer d_act;
  conv3x3_backward(act, p.subspan(w2_offset(), b2_offset() - w2_offset()), d_output,
                   d_params.subspan(w2_offset(), b2_offset() - w2_offset()),
                   d_params.subspan(b2_offset(), out_), &d_act);
  auto pre = cache.hidden_pre.data();
  auto da = d_act.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    if (!(pre[i] > 0.0)) da[i] = 0.0;
  }
  ImageBuffer d_input;
  conv3x3_backward(cache.input, p.subspan(w1_offset(), b1_offset()), d_act,
                   d_params.subspan(w1_offset(), b1_offset()), d_params.subspan(b1_offset(), hidden_),
                   &d_input);
  return d_input;
}

std::array<double, 25> ConvNet::input_jacobian(const Cache& cache, int y, int x, int channel) const {
  if (cache.input.empty()) throw StateError("ConvNet::input_jacobian: missing forward cache");
  std::array<double, 25> jac{};
  const int h = cache.input.height();
  const int w = cache.input.width();
  const double* w1 = params_.data() + w1_offset();
  const double* w2 = params_.data() + w2_offset();
  for (int t2 = 0; t2 < 9; ++t2) {
    const int py = y + t2 / 3 - 1;
    const int px = x + t2 % 3 - 1;
    if (py < 0 || py >= h || px < 0 || px >= w) continue;
    auto pre = cache.hidden_pre.pixel(py, px);
    for (int k = 0; k < hidden_; ++k) {
      if (!(pre[k] > 0.0)) continue;
      const double coef = w2[static_cast<std::size_t>(k) * 9 + t2];  // output channel 0
      if (coef == 0.0) continue;
      for (int t1 = 0; t1 < 9; ++t1) {
        const int vy = py + t1 / 3 - 1;
        const int vx = px + t1 % 3 - 1;
        if (vy < 0 || vy >= h || vx < 0 || vx >= w) continue;
        jac[(vy - y + 2) * 5 + (vx - x + 2)] +=
            coef * w1[(static_cast<std::size_t>(k) * in_ + channel) * 9 + t1];
      }
    }
  }
  return jac;
}

}  // namespace moesplat
