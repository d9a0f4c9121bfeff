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

#include "deconvq/errors.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace deconvq
{

/// Activation map, channel-major then row-major.
struct Tensor3
{
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Tensor3() = default;

  Tensor3(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
    : channels(c), height(h), width(w), data(c * h * w, fill)
  {
  }

  Tensor3(std::size_t c, std::size_t h, std::size_t w, std::vector<float> values)
    : channels(c), height(h), width(w), data(std::move(values))
  {
    detail::require_shape(data.size() == c * h * w, "Tensor3: data length does not match shape");
  }

  std::size_t plane() const { return height * width; }
  std::size_t size() const { return data.size(); }

  float &at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const
  {
    return data[(c * height + y) * width + x];
  }

  bool same_shape(const Tensor3 &o) const
  {
    return channels == o.channels && height == o.height && width == o.width;
  }

  bool all_finite() const
  {
    for (float v : data)
      if (!std::isfinite(v))
        return false;
    return true;
  }
};

/// Kernel stored as (in_channels, out_channels, kh, kw) for both layer kinds.
struct WeightTensor
{
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
  std::vector<float> data;

  WeightTensor() = default;

  WeightTensor(std::size_t ci, std::size_t co, std::size_t h, std::size_t w, float fill = 0.0f)
    : in_channels(ci), out_channels(co), kh(h), kw(w), data(ci * co * h * w, fill)
  {
  }

  WeightTensor(std::size_t ci, std::size_t co, std::size_t h, std::size_t w,
               std::vector<float> values)
    : in_channels(ci), out_channels(co), kh(h), kw(w), data(std::move(values))
  {
    detail::require_shape(data.size() == ci * co * h * w,
                          "WeightTensor: data length does not match shape");
  }

  std::size_t size() const { return data.size(); }

  float &at(std::size_t ci, std::size_t co, std::size_t y, std::size_t x)
  {
    return data[((ci * out_channels + co) * kh + y) * kw + x];
  }
  float at(std::size_t ci, std::size_t co, std::size_t y, std::size_t x) const
  {
    return data[((ci * out_channels + co) * kh + y) * kw + x];
  }
};

enum class LayerKind
{
  conv,
  conv_transpose
};

inline const char *to_string(LayerKind k)
{
  return k == LayerKind::conv ? "conv" : "conv_transpose";
}

inline LayerKind layer_kind_from_string(const std::string &s)
{
  if (s == "conv")
    return LayerKind::conv;
  if (s == "conv_transpose")
    return LayerKind::conv_transpose;
  throw InvalidArgument("unknown layer kind '" + s + "'");
}

struct LayerSpec
{
  LayerKind kind = LayerKind::conv_transpose;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  // LeakyReLU negative slope; nullopt means linear output.
  std::optional<float> activation_slope;

  void validate() const
  {
    detail::require(kernel >= 1, "LayerSpec: kernel must be >= 1");
    detail::require(stride >= 1, "LayerSpec: stride must be >= 1");
    detail::require(padding >= 0, "LayerSpec: padding must be >= 0");
    if (activation_slope)
      detail::require(*activation_slope > 0.0f && *activation_slope < 1.0f,
                      "LayerSpec: activation slope must lie in (0, 1)");
  }
};

struct Layer
{
  LayerSpec spec;
  WeightTensor weights;
  std::vector<float> bias;

  std::size_t in_channels() const { return weights.in_channels; }
  std::size_t out_channels() const { return weights.out_channels; }

  void validate() const
  {
    spec.validate();
    detail::require_shape(weights.kh == static_cast<std::size_t>(spec.kernel) &&
                            weights.kw == static_cast<std::size_t>(spec.kernel),
                          "Layer: kernel size does not match weight tensor");
    detail::require_shape(bias.size() == weights.out_channels,
                          "Layer: bias length must equal out_channels");
  }
};

struct DecoderModel
{
  std::vector<Layer> layers;
  // Per-channel multiplier applied to the model input before layer 0. Empty
  // means identity. Smoothing of the first layer lands here because there is
  // no preceding layer to fuse into.
  std::vector<float> input_transform;

  std::size_t input_channels() const { return layers.empty() ? 0 : layers.front().in_channels(); }

  void validate() const
  {
    detail::require(!layers.empty(), "DecoderModel: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i)
    {
      layers[i].validate();
      if (i > 0)
        detail::require_shape(layers[i - 1].out_channels() == layers[i].in_channels(),
                              "DecoderModel: layer " + std::to_string(i) +
                                " in_channels does not match previous out_channels");
    }
    if (!input_transform.empty())
      detail::require_shape(input_transform.size() == input_channels(),
                            "DecoderModel: input_transform length mismatch");
  }
};

} // namespace deconvq
