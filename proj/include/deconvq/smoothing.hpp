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

// Input channel-wise activation smoothing with region-variance exemption.
//
// A smoothing factor s_c moves quantization difficulty from activations to
// weights: the activation entering a layer on channel c is divided by s_c and
// the weights reading that channel are multiplied by s_c. The division is
// fused into the producing layer (its output channel c and bias), which is
// exact across LeakyReLU because max(a*x, x) is positively homogeneous. The
// first layer has no producer, so its factors are stored as the model input
// transform.

#include "deconvq/conv.hpp"
#include "deconvq/errors.hpp"
#include "deconvq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deconvq
{

struct LayerSmoothing
{
  std::size_t layer_index = 0;
  std::vector<float> scales;
  std::vector<std::size_t> exempt;
};

struct SmoothingPlan
{
  double alpha = 0.8;
  std::vector<LayerSmoothing> layers;
};

struct RegionMask
{
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> membership;

  RegionMask() = default;
  RegionMask(std::size_t h, std::size_t w, bool fill = false)
    : height(h), width(w), membership(h * w, fill ? 1 : 0)
  {
  }

  bool at(std::size_t y, std::size_t x) const { return membership[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v) { membership[y * width + x] = v ? 1 : 0; }

  std::size_t count() const
  {
    return static_cast<std::size_t>(
      std::count_if(membership.begin(), membership.end(), [](std::uint8_t v) { return v != 0; }));
  }
};

struct ChannelVarianceReport
{
  std::vector<double> variance;
  std::vector<double> mean;
  // Channel indices by descending variance, lower index first on ties.
  std::vector<std::size_t> ranking;
};

/// Migration factors, one per input channel:
/// s_c = max|X_c|^alpha / max|W_c|^(1 - alpha), or 1 when either maximum is zero.
inline std::vector<float> compute_icas_scales(std::span<const Tensor3> calib, const WeightTensor &w,
                                              double alpha)
{
  detail::require(!calib.empty(), "compute_icas_scales: empty calibration set");
  detail::require(alpha >= 0.0 && alpha <= 1.0, "compute_icas_scales: alpha must lie in [0, 1]");
  const std::size_t channels = w.in_channels;

  std::vector<double> act_max(channels, 0.0);
  for (const auto &x : calib)
  {
    detail::require_shape(x.channels == channels, "compute_icas_scales: channel count mismatch");
    const std::size_t plane = x.plane();
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        act_max[c] = std::max(act_max[c], static_cast<double>(std::fabs(x.data[c * plane + i])));
  }

  std::vector<double> w_max(channels, 0.0);
  const std::size_t slice = w.out_channels * w.kh * w.kw;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < slice; ++i)
      w_max[c] = std::max(w_max[c], static_cast<double>(std::fabs(w.data[c * slice + i])));

  std::vector<float> scales(channels, 1.0f);
  for (std::size_t c = 0; c < channels; ++c)
  {
    if (act_max[c] == 0.0 || w_max[c] == 0.0)
      continue;
    const double s = std::pow(act_max[c], alpha) / std::pow(w_max[c], 1.0 - alpha);
    if (std::isfinite(s) && s > 0.0)
      scales[c] = static_cast<float>(s);
  }
  return scales;
}

/// Nearest-neighbour resample (pixel-centre sampling). An empty result falls
/// back to the full frame so that variance ranking stays defined.
inline RegionMask resize_mask(const RegionMask &mask, std::size_t h, std::size_t w)
{
  detail::require(h >= 1 && w >= 1, "resize_mask: target dims must be >= 1");
  if (mask.height == h && mask.width == w)
    return mask;
  RegionMask out(h, w);
  for (std::size_t y = 0; y < h; ++y)
  {
    const std::size_t sy = std::min(mask.height - 1, (2 * y + 1) * mask.height / (2 * h));
    for (std::size_t x = 0; x < w; ++x)
    {
      const std::size_t sx = std::min(mask.width - 1, (2 * x + 1) * mask.width / (2 * w));
      out.set(y, x, mask.at(sy, sx));
    }
  }
  if (out.count() == 0)
    return RegionMask(h, w, true);
  return out;
}

inline std::vector<std::size_t> rank_by_variance(const std::vector<double> &variance)
{
  std::vector<std::size_t> order(variance.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return variance[a] > variance[b]; });
  return order;
}

/// Population variance of every channel over the masked pixels.
inline ChannelVarianceReport channel_region_variance(const Tensor3 &x, const RegionMask &mask)
{
  detail::require_shape(mask.height == x.height && mask.width == x.width,
                        "channel_region_variance: mask dims do not match activation");
  const std::size_t n = mask.count();
  detail::require(n >= 1, "channel_region_variance: empty region mask");

  ChannelVarianceReport rep;
  rep.variance.assign(x.channels, 0.0);
  rep.mean.assign(x.channels, 0.0);
  const std::size_t plane = x.plane();
  for (std::size_t c = 0; c < x.channels; ++c)
  {
    const float *p = x.data.data() + c * plane;
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.membership[i])
        sum += p[i];
    const double mu = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.membership[i])
      {
        const double d = p[i] - mu;
        ss += d * d;
      }
    rep.mean[c] = mu;
    rep.variance[c] = ss / static_cast<double>(n);
  }
  rep.ranking = rank_by_variance(rep.variance);
  return rep;
}

/// Per-channel region variance averaged across calibration samples.
inline ChannelVarianceReport mean_region_variance(std::span<const Tensor3> samples,
                                                  const RegionMask &mask)
{
  detail::require(!samples.empty(), "mean_region_variance: empty sample set");
  ChannelVarianceReport acc;
  for (const auto &x : samples)
  {
    auto r = channel_region_variance(x, mask);
    if (acc.variance.empty())
    {
      acc.variance.assign(r.variance.size(), 0.0);
      acc.mean.assign(r.mean.size(), 0.0);
    }
    detail::require_shape(r.variance.size() == acc.variance.size(),
                          "mean_region_variance: channel count differs between samples");
    for (std::size_t c = 0; c < r.variance.size(); ++c)
    {
      acc.variance[c] += r.variance[c];
      acc.mean[c] += r.mean[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (auto &v : acc.variance)
    v *= inv;
  for (auto &v : acc.mean)
    v *= inv;
  acc.ranking = rank_by_variance(acc.variance);
  return acc;
}

/// ceil(k% of C) highest-variance channels, returned in ascending index order.
inline std::vector<std::size_t> select_ffas_exempt(const ChannelVarianceReport &report,
                                                   double k_percent)
{
  detail::require(k_percent >= 0.0 && k_percent <= 100.0,
                  "select_ffas_exempt: k_percent must lie in [0, 100]");
  const std::size_t channels = report.ranking.size();
  // The epsilon keeps exact products such as 75% of 8 from rounding up.
  auto count = static_cast<std::size_t>(
    std::ceil(k_percent * static_cast<double>(channels) / 100.0 - 1e-9));
  count = std::min(count, channels);
  std::vector<std::size_t> out(report.ranking.begin(),
                               report.ranking.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::vector<std::size_t>>
select_ffas_exempt(std::span<const ChannelVarianceReport> reports, double k_percent)
{
  std::vector<std::vector<std::size_t>> out;
  out.reserve(reports.size());
  for (const auto &r : reports)
    out.push_back(select_ffas_exempt(r, k_percent));
  return out;
}

namespace detail
{

inline void require_positive_scales(std::span<const float> s, const std::string &who)
{
  for (std::size_t c = 0; c < s.size(); ++c)
    if (!(s[c] > 0.0f) || !std::isfinite(s[c]))
      throw InvalidArgument(who + ": scale for channel " + std::to_string(c) +
                            " must be positive and finite (got " + std::to_string(s[c]) + ")");
}

} // namespace detail

/// Multiplies input-channel slice c of the weights by factor[c].
inline void scale_weight_inputs(WeightTensor &w, std::span<const float> factor)
{
  detail::require_shape(factor.size() == w.in_channels, "scale_weight_inputs: length mismatch");
  const std::size_t slice = w.out_channels * w.kh * w.kw;
  for (std::size_t c = 0; c < w.in_channels; ++c)
    for (std::size_t i = 0; i < slice; ++i)
      w.data[c * slice + i] *= factor[c];
}

/// Multiplies output channel c of the weights and the bias by factor[c].
inline void scale_layer_outputs(Layer &layer, std::span<const float> factor)
{
  auto &w = layer.weights;
  detail::require_shape(factor.size() == w.out_channels, "scale_layer_outputs: length mismatch");
  const std::size_t k2 = w.kh * w.kw;
  for (std::size_t ci = 0; ci < w.in_channels; ++ci)
    for (std::size_t co = 0; co < w.out_channels; ++co)
    {
      float *p = w.data.data() + (ci * w.out_channels + co) * k2;
      for (std::size_t i = 0; i < k2; ++i)
        p[i] *= factor[co];
    }
  for (std::size_t co = 0; co < w.out_channels; ++co)
    layer.bias[co] *= factor[co];
}

/// Compensating weights for an input rescaled channel-wise by act_scale:
/// W~[c] = W[c] / act_scale[c].
inline Layer compensate_input_scaling(Layer layer, std::span<const float> act_scale)
{
  detail::require_positive_scales(act_scale, "compensate_input_scaling");
  std::vector<float> inv(act_scale.size());
  for (std::size_t c = 0; c < act_scale.size(); ++c)
    inv[c] = 1.0f / act_scale[c];
  scale_weight_inputs(layer.weights, inv);
  return layer;
}

/// Folds an output rescaling into the producing layer: its pre-activation
/// output channel c becomes act_scale[c] times the original.
inline Layer fuse_output_scaling(Layer layer, std::span<const float> act_scale)
{
  detail::require_positive_scales(act_scale, "fuse_output_scaling");
  if (layer.spec.activation_slope && !(*layer.spec.activation_slope > 0.0f))
    throw InvalidArgument("fuse_output_scaling: activation is not positively homogeneous");
  scale_layer_outputs(layer, act_scale);
  return layer;
}

inline DecoderModel apply_smoothing(const DecoderModel &model, const SmoothingPlan &plan)
{
  model.validate();
  DecoderModel out = model;
  for (const auto &entry : plan.layers)
  {
    detail::require(entry.layer_index < out.layers.size(),
                    "apply_smoothing: layer index " + std::to_string(entry.layer_index) +
                      " out of range");
    Layer &layer = out.layers[entry.layer_index];
    detail::require_shape(entry.scales.size() == layer.in_channels(),
                          "apply_smoothing: scale count does not match layer " +
                            std::to_string(entry.layer_index) + " input channels");
    detail::require_positive_scales(entry.scales, "apply_smoothing");
    for (auto c : entry.exempt)
    {
      detail::require(c < entry.scales.size(), "apply_smoothing: exempt channel out of range");
      detail::require(entry.scales[c] == 1.0f, "apply_smoothing: exempt channel must have scale 1");
    }

    std::vector<float> act_scale(entry.scales.size());
    for (std::size_t c = 0; c < act_scale.size(); ++c)
      act_scale[c] = 1.0f / entry.scales[c];

    if (entry.layer_index == 0)
    {
      if (out.input_transform.empty())
        out.input_transform.assign(act_scale.size(), 1.0f);
      for (std::size_t c = 0; c < act_scale.size(); ++c)
        out.input_transform[c] *= act_scale[c];
    }
    else
    {
      Layer &prev = out.layers[entry.layer_index - 1];
      if (prev.spec.activation_slope && !(*prev.spec.activation_slope > 0.0f))
        throw InvalidArgument("apply_smoothing: cannot fuse across layer " +
                              std::to_string(entry.layer_index - 1) +
                              " activation (not positively homogeneous)");
      scale_layer_outputs(prev, act_scale);
    }
    scale_weight_inputs(layer.weights, entry.scales);
  }
  return out;
}

struct SmoothingOptions
{
  double alpha = 0.8;
  double k_percent = 75.0;
  // Region used for variance ranking; resampled to each layer's input size.
  std::optional<RegionMask> region;
};

/// Scales and exemptions for every layer, computed on the unsmoothed model.
inline SmoothingPlan plan_smoothing(const DecoderModel &model, std::span<const Tensor3> calib,
                                    const SmoothingOptions &opt)
{
  detail::require(!calib.empty(), "plan_smoothing: empty calibration set");
  std::vector<std::vector<Tensor3>> per_layer(model.layers.size());
  for (const auto &x : calib)
  {
    auto trace = forward_trace(model, x);
    for (std::size_t i = 0; i < model.layers.size(); ++i)
      per_layer[i].push_back(std::move(trace.inputs[i]));
  }

  SmoothingPlan plan;
  plan.alpha = opt.alpha;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    LayerSmoothing entry;
    entry.layer_index = i;
    entry.scales = compute_icas_scales(per_layer[i], model.layers[i].weights, opt.alpha);
    if (opt.region && opt.k_percent > 0.0)
    {
      const auto &x0 = per_layer[i].front();
      const RegionMask m = resize_mask(*opt.region, x0.height, x0.width);
      entry.exempt = select_ffas_exempt(mean_region_variance(per_layer[i], m), opt.k_percent);
      for (auto c : entry.exempt)
        entry.scales[c] = 1.0f;
    }
    plan.layers.push_back(std::move(entry));
  }
  return plan;
}

} // namespace deconvq
