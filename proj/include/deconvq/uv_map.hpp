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
#include "deconvq/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace deconvq
{

struct UVVertexSet
{
  std::vector<std::array<float, 2>> uv;
};

/// Per-texel importance in [0, w_max], broadcast across channels when applied.
struct UVImportanceMap
{
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> weights;
  float w_max = 1.0f;

  UVImportanceMap() = default;
  UVImportanceMap(std::size_t h, std::size_t w, float wmax, float fill = 0.0f)
    : height(h), width(w), weights(h * w, fill), w_max(wmax)
  {
  }

  float at(std::size_t y, std::size_t x) const { return weights[y * width + x]; }
  float &at(std::size_t y, std::size_t x) { return weights[y * width + x]; }
};

inline std::vector<std::uint32_t> uv_hit_counts(const UVVertexSet &verts, std::size_t h, std::size_t w)
{
  std::vector<std::uint32_t> hits(h * w, 0);
  for (const auto &p : verts.uv)
  {
    const float u = p[0], v = p[1];
    if (!(u >= 0.0f && u <= 1.0f && v >= 0.0f && v <= 1.0f))
      throw InvalidArgument("build_uv_map: UV coordinate outside [0, 1]");
    // u = 1.0 would floor to index h; clamp onto the last texel.
    const auto m = std::min(h - 1, static_cast<std::size_t>(std::floor(static_cast<double>(u) * h)));
    const auto n = std::min(w - 1, static_cast<std::size_t>(std::floor(static_cast<double>(v) * w)));
    ++hits[m * w + n];
  }
  return hits;
}

/// Hit-count map normalized to [0, w_max]; texels with no hits are exactly 0.
inline UVImportanceMap build_uv_map(const UVVertexSet &verts, std::size_t h, std::size_t w,
                                    float w_max = 1.0f)
{
  detail::require(!verts.uv.empty(), "build_uv_map: empty vertex set");
  detail::require(h >= 1 && w >= 1, "build_uv_map: map dims must be >= 1");
  detail::require(w_max > 0.0f && std::isfinite(w_max), "build_uv_map: w_max must be positive");

  const auto hits = uv_hit_counts(verts, h, w);
  const auto peak = *std::max_element(hits.begin(), hits.end());
  UVImportanceMap map(h, w, w_max);
  for (std::size_t i = 0; i < hits.size(); ++i)
    if (hits[i] != 0)
      map.weights[i] =
        hits[i] == peak ? w_max
                        : static_cast<float>(static_cast<double>(hits[i]) / peak * w_max);
  return map;
}

namespace detail
{

// Overlap of destination bin i with each source cell along one axis.
struct AxisWeights
{
  std::vector<std::vector<std::pair<std::size_t, double>>> taps;
};

inline AxisWeights area_axis(std::size_t src, std::size_t dst)
{
  AxisWeights aw;
  aw.taps.resize(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i)
  {
    const double lo = i * ratio, hi = (i + 1) * ratio;
    auto first = static_cast<std::size_t>(std::floor(lo));
    for (std::size_t s = first; s < src && static_cast<double>(s) < hi; ++s)
    {
      const double ov = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
      if (ov > 0.0)
        aw.taps[i].emplace_back(s, ov);
    }
  }
  return aw;
}

} // namespace detail

/// Area-average resampling to a layer's input size.
inline UVImportanceMap downsample_uv(const UVImportanceMap &map, std::size_t h, std::size_t w)
{
  detail::require(h >= 1 && w >= 1, "downsample_uv: target dims must be >= 1");
  if (h == map.height && w == map.width)
    return map;
  const auto ay = detail::area_axis(map.height, h);
  const auto ax = detail::area_axis(map.width, w);
  UVImportanceMap out(h, w, map.w_max);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
    {
      double acc = 0.0, area = 0.0;
      for (const auto &[sy, wy] : ay.taps[y])
        for (const auto &[sx, wx] : ax.taps[x])
        {
          acc += wy * wx * map.at(sy, sx);
          area += wy * wx;
        }
      out.at(y, x) = static_cast<float>(std::min<double>(acc / area, map.w_max));
    }
  return out;
}

/// Elementwise product of every channel with the map.
inline Tensor3 apply_uv_weighting(Tensor3 x, const UVImportanceMap &map)
{
  detail::require_shape(map.height == x.height && map.width == x.width,
                        "apply_uv_weighting: map dims do not match activation");
  const std::size_t plane = x.plane();
  for (std::size_t c = 0; c < x.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      x.data[c * plane + i] *= map.weights[i];
  return x;
}

} // namespace deconvq
