/*
 * Copyright (c) 2026 The deconvq Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Reference convolution kernels. Everything here is a plain loop nest and
// serves as the numerical oracle for the smoothing, quantization and
// simulator code.
//
// Flip convention: a transposed convolution equals zero insertion followed by
// a unit-stride correlation with the spatially flipped kernel. im2col() always
// produces the unflipped receptive field, so unfold_weights() applies the flip
// for conv_transpose layers: row (c, a, b) of the unfolded matrix holds
// W[c, co, K-1-a, K-1-b]. Standard conv layers unfold without a flip.

#include "deconvq/errors.hpp"
#include "deconvq/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace deconvq
{

/// Width after inserting (S-1) zeros between pixels and K-P-1 on each border.
inline std::size_t zero_insert_width(std::size_t width, int kernel, int padding, int stride)
{
  detail::require(width >= 1, "zero_insert_width: width must be >= 1");
  detail::require(kernel >= 1 && stride >= 1 && padding >= 0,
                  "zero_insert_width: invalid kernel/stride/padding");
  const int border = kernel - padding - 1;
  detail::require(border >= 0, "zero_insert_width: K - P - 1 is negative");
  return width + 2 * static_cast<std::size_t>(border) +
         (width - 1) * static_cast<std::size_t>(stride - 1);
}

/// Spatial output size of a layer for an input of size `in`.
inline std::size_t layer_output_size(const LayerSpec &spec, std::size_t in)
{
  detail::require(in >= 1, "layer_output_size: input size must be >= 1");
  const auto k = static_cast<std::ptrdiff_t>(spec.kernel);
  const auto s = static_cast<std::ptrdiff_t>(spec.stride);
  const auto p = static_cast<std::ptrdiff_t>(spec.padding);
  const auto n = static_cast<std::ptrdiff_t>(in);
  std::ptrdiff_t out = 0;
  if (spec.kind == LayerKind::conv_transpose)
    out = (n - 1) * s - 2 * p + k;
  else
    out = (n + 2 * p - k) < 0 ? 0 : (n + 2 * p - k) / s + 1;
  detail::require_shape(out >= 1, "layer geometry yields an empty output");
  return static_cast<std::size_t>(out);
}

inline Tensor3 zero_insert(const Tensor3 &x, const LayerSpec &spec)
{
  detail::require(spec.kind == LayerKind::conv_transpose, "zero_insert: layer is not conv_transpose");
  const std::size_t oh = zero_insert_width(x.height, spec.kernel, spec.padding, spec.stride);
  const std::size_t ow = zero_insert_width(x.width, spec.kernel, spec.padding, spec.stride);
  const std::size_t border = static_cast<std::size_t>(spec.kernel - spec.padding - 1);
  const std::size_t s = static_cast<std::size_t>(spec.stride);
  Tensor3 out(x.channels, oh, ow);
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t y = 0; y < x.height; ++y)
      for (std::size_t v = 0; v < x.width; ++v)
        out.at(c, border + y * s, border + v * s) = x.at(c, y, v);
  return out;
}

inline Tensor3 pad_spatial(const Tensor3 &x, std::size_t pad)
{
  Tensor3 out(x.channels, x.height + 2 * pad, x.width + 2 * pad);
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t y = 0; y < x.height; ++y)
      for (std::size_t v = 0; v < x.width; ++v)
        out.at(c, y + pad, v + pad) = x.at(c, y, v);
  return out;
}

namespace detail
{

inline void check_layer_input(const Tensor3 &x, const WeightTensor &w, std::span<const float> bias,
                              const LayerSpec &spec)
{
  spec.validate();
  require_shape(x.channels == w.in_channels, "layer input has " + std::to_string(x.channels) +
                                               " channels, weights expect " +
                                               std::to_string(w.in_channels));
  require_shape(w.kh == static_cast<std::size_t>(spec.kernel) &&
                  w.kw == static_cast<std::size_t>(spec.kernel),
                "weight kernel does not match layer spec");
  require_shape(bias.empty() || bias.size() == w.out_channels, "bias length mismatch");
}

} // namespace detail

/// Scatter form: input pixel (iy, ix) contributes to output (iy*S - P + ky, ix*S - P + kx).
inline Tensor3 conv_transpose_direct(const Tensor3 &x, const WeightTensor &w,
                                     std::span<const float> bias, const LayerSpec &spec)
{
  detail::check_layer_input(x, w, bias, spec);
  detail::require(spec.kind == LayerKind::conv_transpose, "conv_transpose_direct: wrong layer kind");
  const std::size_t oh = layer_output_size(spec, x.height);
  const std::size_t ow = layer_output_size(spec, x.width);
  const std::ptrdiff_t s = spec.stride, p = spec.padding, k = spec.kernel;

  std::vector<double> acc(w.out_channels * oh * ow, 0.0);
  for (std::size_t ci = 0; ci < x.channels; ++ci)
    for (std::size_t iy = 0; iy < x.height; ++iy)
      for (std::size_t ix = 0; ix < x.width; ++ix)
      {
        const double v = x.at(ci, iy, ix);
        if (v == 0.0)
          continue;
        for (std::size_t co = 0; co < w.out_channels; ++co)
          for (std::ptrdiff_t ky = 0; ky < k; ++ky)
          {
            const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy) * s - p + ky;
            if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(oh))
              continue;
            for (std::ptrdiff_t kx = 0; kx < k; ++kx)
            {
              const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix) * s - p + kx;
              if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(ow))
                continue;
              acc[(co * oh + oy) * ow + ox] += v * w.at(ci, co, ky, kx);
            }
          }
      }

  Tensor3 out(w.out_channels, oh, ow);
  for (std::size_t co = 0; co < w.out_channels; ++co)
  {
    const double b = bias.empty() ? 0.0 : bias[co];
    for (std::size_t i = 0; i < oh * ow; ++i)
      out.data[co * oh * ow + i] = static_cast<float>(acc[co * oh * ow + i] + b);
  }
  return out;
}

/// Strided cross-correlation with zero padding.
inline Tensor3 conv_direct(const Tensor3 &x, const WeightTensor &w, std::span<const float> bias,
                           const LayerSpec &spec)
{
  detail::check_layer_input(x, w, bias, spec);
  detail::require(spec.kind == LayerKind::conv, "conv_direct: wrong layer kind");
  const std::size_t oh = layer_output_size(spec, x.height);
  const std::size_t ow = layer_output_size(spec, x.width);
  const std::ptrdiff_t s = spec.stride, p = spec.padding, k = spec.kernel;
  const auto h = static_cast<std::ptrdiff_t>(x.height);
  const auto wd = static_cast<std::ptrdiff_t>(x.width);

  Tensor3 out(w.out_channels, oh, ow);
  for (std::size_t co = 0; co < w.out_channels; ++co)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
      {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (std::size_t ci = 0; ci < x.channels; ++ci)
          for (std::ptrdiff_t ky = 0; ky < k; ++ky)
          {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s - p + ky;
            if (iy < 0 || iy >= h)
              continue;
            for (std::ptrdiff_t kx = 0; kx < k; ++kx)
            {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s - p + kx;
              if (ix < 0 || ix >= wd)
                continue;
              acc += static_cast<double>(x.at(ci, iy, ix)) * w.at(ci, co, ky, kx);
            }
          }
        out.at(co, oy, ox) = static_cast<float>(acc);
      }
  return out;
}

inline Tensor3 leaky_relu(Tensor3 x, float slope)
{
  detail::require(slope > 0.0f && slope < 1.0f, "leaky_relu: slope must lie in (0, 1)");
  for (float &v : x.data)
    v = std::max(slope * v, v);
  return x;
}

/// Linear part of a layer (weights + bias), no activation.
inline Tensor3 layer_linear(const Layer &layer, const Tensor3 &x)
{
  return layer.spec.kind == LayerKind::conv_transpose
           ? conv_transpose_direct(x, layer.weights, layer.bias, layer.spec)
           : conv_direct(x, layer.weights, layer.bias, layer.spec);
}

inline Tensor3 apply_activation(const LayerSpec &spec, Tensor3 y)
{
  if (spec.activation_slope)
    return leaky_relu(std::move(y), *spec.activation_slope);
  return y;
}

inline Tensor3 apply_layer(const Layer &layer, const Tensor3 &x)
{
  return apply_activation(layer.spec, layer_linear(layer, x));
}

inline Tensor3 scale_channels(Tensor3 x, std::span<const float> scale)
{
  detail::require_shape(scale.size() == x.channels, "scale_channels: length mismatch");
  const std::size_t plane = x.plane();
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      x.data[c * plane + i] *= scale[c];
  return x;
}

/// Model input after the stored input transform, i.e. what layer 0 consumes.
inline Tensor3 model_input(const DecoderModel &model, const Tensor3 &x)
{
  detail::require_shape(x.channels == model.input_channels(),
                        "forward: input has " + std::to_string(x.channels) +
                          " channels, model expects " + std::to_string(model.input_channels()));
  if (model.input_transform.empty())
    return x;
  return scale_channels(x, model.input_transform);
}

inline Tensor3 forward(const DecoderModel &model, const Tensor3 &x)
{
  model.validate();
  Tensor3 cur = model_input(model, x);
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    try
    {
      cur = apply_layer(model.layers[i], cur);
    }
    catch (const ShapeError &e)
    {
      throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
    }
  }
  return cur;
}

/// Forward pass that also returns the input of every layer (inputs[i] feeds layer i).
struct ForwardTrace
{
  std::vector<Tensor3> inputs;
  Tensor3 output;
};

inline ForwardTrace forward_trace(const DecoderModel &model, const Tensor3 &x)
{
  model.validate();
  ForwardTrace trace;
  Tensor3 cur = model_input(model, x);
  for (const auto &layer : model.layers)
  {
    trace.inputs.push_back(cur);
    cur = apply_layer(layer, cur);
  }
  trace.output = std::move(cur);
  return trace;
}

/// Unfolded activation matrix, (C*K*K) x (H_out*W_out), row-major.
template <typename T> struct BasicIm2col
{
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;
  std::vector<std::uint8_t> nonzero_mask;

  BasicIm2col() = default;
  BasicIm2col(std::size_t r, std::size_t c, std::vector<T> values)
    : rows(r), cols(c), data(std::move(values)), nonzero_mask(data.size())
  {
    detail::require_shape(data.size() == r * c, "im2col: data length does not match shape");
    refresh_mask();
  }

  void refresh_mask()
  {
    nonzero_mask.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      nonzero_mask[i] = data[i] != T{} ? 1 : 0;
  }

  T at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t count_nonzero() const
  {
    return static_cast<std::size_t>(std::count(nonzero_mask.begin(), nonzero_mask.end(), 1));
  }

  double zero_fraction() const
  {
    return data.empty() ? 0.0
                        : 1.0 - static_cast<double>(count_nonzero()) / static_cast<double>(data.size());
  }

  bool operator==(const BasicIm2col &o) const
  {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

using Im2colMatrix = BasicIm2col<float>;

/// Row index order is (channel, kh, kw); column j is output location (j / W_out, j % W_out).
inline Im2colMatrix im2col(const Tensor3 &x, int kernel, int stride = 1)
{
  detail::require(kernel >= 1 && stride >= 1, "im2col: invalid kernel/stride");
  const auto k = static_cast<std::size_t>(kernel);
  const auto s = static_cast<std::size_t>(stride);
  detail::require_shape(k <= x.height && k <= x.width, "im2col: kernel larger than input map");
  const std::size_t oh = (x.height - k) / s + 1;
  const std::size_t ow = (x.width - k) / s + 1;
  const std::size_t rows = x.channels * k * k;
  const std::size_t cols = oh * ow;
  std::vector<float> data(rows * cols, 0.0f);
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b)
      {
        float *row = data.data() + ((c * k + a) * k + b) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox)
            row[oy * ow + ox] = x.at(c, oy * s + a, ox * s + b);
      }
  return Im2colMatrix(rows, cols, std::move(data));
}

/// Full lowering of a layer input to its GEMM operand.
inline Im2colMatrix lower_input(const LayerSpec &spec, const Tensor3 &x)
{
  if (spec.kind == LayerKind::conv_transpose)
    return im2col(zero_insert(x, spec), spec.kernel, 1);
  return im2col(pad_spatial(x, static_cast<std::size_t>(spec.padding)), spec.kernel, spec.stride);
}

/// Dense row-major matrix; the unfolded weight W_mat is (C_in*K*K) x C_out.
struct WeightMatrix
{
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  WeightMatrix() = default;
  WeightMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  WeightMatrix(std::size_t r, std::size_t c, std::vector<float> values)
    : rows(r), cols(c), data(std::move(values))
  {
    detail::require_shape(data.size() == r * c, "WeightMatrix: data length does not match shape");
  }

  float &at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

inline WeightMatrix unfold_weights(const WeightTensor &w, LayerKind kind)
{
  const std::size_t k = w.kh;
  detail::require_shape(w.kh == w.kw, "unfold_weights: square kernels only");
  WeightMatrix m(w.in_channels * k * k, w.out_channels);
  const bool flip = kind == LayerKind::conv_transpose;
  for (std::size_t c = 0; c < w.in_channels; ++c)
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b)
      {
        const std::size_t r = (c * k + a) * k + b;
        const std::size_t ky = flip ? k - 1 - a : a;
        const std::size_t kx = flip ? k - 1 - b : b;
        for (std::size_t co = 0; co < w.out_channels; ++co)
          m.at(r, co) = w.at(c, co, ky, kx);
      }
  return m;
}

inline WeightMatrix unfold_weights(const Layer &layer)
{
  return unfold_weights(layer.weights, layer.spec.kind);
}

inline WeightTensor fold_weights(const WeightMatrix &m, LayerKind kind, std::size_t in_channels,
                                 std::size_t kernel)
{
  const std::size_t k = kernel;
  detail::require_shape(m.rows == in_channels * k * k, "fold_weights: row count mismatch");
  WeightTensor w(in_channels, m.cols, k, k);
  const bool flip = kind == LayerKind::conv_transpose;
  for (std::size_t c = 0; c < in_channels; ++c)
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b)
      {
        const std::size_t r = (c * k + a) * k + b;
        const std::size_t ky = flip ? k - 1 - a : a;
        const std::size_t kx = flip ? k - 1 - b : b;
        for (std::size_t co = 0; co < m.cols; ++co)
          w.at(c, co, ky, kx) = m.at(r, co);
      }
  return w;
}

/// Y_col = W_mat^T X_col with 64-bit accumulation, reshaped to (C_out, out_h, out_w).
/// Each output location is produced by exactly one column, so col2im is a reshape.
inline Tensor3 gemm_col2im(const WeightMatrix &w, const Im2colMatrix &x, std::span<const float> bias,
                           std::size_t out_h, std::size_t out_w)
{
  detail::require_shape(w.rows == x.rows, "gemm: weight rows do not match im2col rows");
  detail::require_shape(x.cols == out_h * out_w, "gemm: column count does not match output size");
  detail::require_shape(bias.empty() || bias.size() == w.cols, "gemm: bias length mismatch");
  Tensor3 out(w.cols, out_h, out_w);
  std::vector<double> acc(x.cols);
  for (std::size_t co = 0; co < w.cols; ++co)
  {
    std::fill(acc.begin(), acc.end(), bias.empty() ? 0.0 : static_cast<double>(bias[co]));
    for (std::size_t r = 0; r < w.rows; ++r)
    {
      const double wv = w.at(r, co);
      if (wv == 0.0)
        continue;
      const float *row = x.data.data() + r * x.cols;
      for (std::size_t j = 0; j < x.cols; ++j)
        acc[j] += wv * row[j];
    }
    for (std::size_t j = 0; j < x.cols; ++j)
      out.data[co * x.cols + j] = static_cast<float>(acc[j]);
  }
  return out;
}

/// Linear part of a layer through the im2col/GEMM route.
inline Tensor3 layer_linear_gemm(const Layer &layer, const Tensor3 &x)
{
  detail::check_layer_input(x, layer.weights, layer.bias, layer.spec);
  const Im2colMatrix cols = lower_input(layer.spec, x);
  return gemm_col2im(unfold_weights(layer), cols, layer.bias, layer_output_size(layer.spec, x.height),
                     layer_output_size(layer.spec, x.width));
}

} // namespace deconvq
