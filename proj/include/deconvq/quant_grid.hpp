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

#include "deconvq/conv.hpp"
#include "deconvq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deconvq
{

enum class GridScheme
{
  symmetric_per_channel, // weights: one scale per output channel, zero point 0
  asymmetric_per_tensor  // activations: min-max with a zero point
};

inline const char *to_string(GridScheme s)
{
  return s == GridScheme::symmetric_per_channel ? "symmetric_per_channel" : "asymmetric_per_tensor";
}

struct QuantGrid
{
  int bits = 8;
  GridScheme scheme = GridScheme::symmetric_per_channel;
  std::vector<double> scales;
  std::vector<std::int64_t> zero_points;

  std::int64_t qmin() const
  {
    return scheme == GridScheme::symmetric_per_channel ? -(std::int64_t{1} << (bits - 1)) : 0;
  }
  std::int64_t qmax() const
  {
    return scheme == GridScheme::symmetric_per_channel ? (std::int64_t{1} << (bits - 1)) - 1
                                                       : (std::int64_t{1} << bits) - 1;
  }

  std::size_t channel_index(std::size_t ch) const { return scales.size() == 1 ? 0 : ch; }

  std::int64_t quantize(double v, std::size_t ch = 0) const
  {
    const std::size_t i = channel_index(ch);
    const double q = std::nearbyint(v / scales[i]) + static_cast<double>(zero_points[i]);
    return static_cast<std::int64_t>(
      std::clamp(q, static_cast<double>(qmin()), static_cast<double>(qmax())));
  }

  double dequantize(std::int64_t q, std::size_t ch = 0) const
  {
    const std::size_t i = channel_index(ch);
    return static_cast<double>(q - zero_points[i]) * scales[i];
  }

  double fake_quant(double v, std::size_t ch = 0) const { return dequantize(quantize(v, ch), ch); }

  void validate() const
  {
    detail::require(bits >= 2 && bits <= 32, "QuantGrid: bits must lie in [2, 32]");
    detail::require(!scales.empty() && scales.size() == zero_points.size(),
                    "QuantGrid: scale/zero-point count mismatch");
    for (double s : scales)
      detail::require(s > 0.0 && std::isfinite(s), "QuantGrid: scales must be positive");
  }
};

namespace detail
{

inline void require_bits(int bits)
{
  require(bits >= 2 && bits <= 32, "quantization bits must lie in [2, 32], got " + std::to_string(bits));
}

} // namespace detail

/// Symmetric grid, one scale per column: scale = max|w| / (2^(bits-1) - 1).
inline QuantGrid make_weight_grid(const WeightMatrix &w, int bits)
{
  detail::require_bits(bits);
  detail::require(w.rows > 0 && w.cols > 0, "make_weight_grid: empty weight matrix");
  QuantGrid g;
  g.bits = bits;
  g.scheme = GridScheme::symmetric_per_channel;
  g.scales.assign(w.cols, 0.0);
  g.zero_points.assign(w.cols, 0);
  for (std::size_t r = 0; r < w.rows; ++r)
    for (std::size_t c = 0; c < w.cols; ++c)
      g.scales[c] = std::max(g.scales[c], static_cast<double>(std::fabs(w.at(r, c))));
  const double levels = static_cast<double>((std::int64_t{1} << (bits - 1)) - 1);
  for (auto &s : g.scales)
    s = s == 0.0 ? 1.0 : s / levels;
  return g;
}

/// Nearest-rank percentile of |v|.
inline double abs_percentile(std::span<const float> values, double pct)
{
  detail::require(!values.empty(), "abs_percentile: empty value set");
  std::vector<float> a(values.size());
  std::transform(values.begin(), values.end(), a.begin(), [](float v) { return std::fabs(v); });
  const auto n = a.size();
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(rank - 1), a.end());
  return a[rank - 1];
}

/// Asymmetric per-tensor min-max grid. With a clip percentile the range is
/// limited to [-p, p] where p is that percentile of |v|.
inline QuantGrid make_activation_grid(std::span<const float> values, int bits,
                                      std::optional<double> clip_percentile = 99.9)
{
  detail::require_bits(bits);
  detail::require(!values.empty(), "make_activation_grid: empty value set");
  double lo = 0.0, hi = 0.0;
  for (float v : values)
  {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  if (clip_percentile)
  {
    detail::require(*clip_percentile > 0.0 && *clip_percentile <= 100.0,
                    "make_activation_grid: clip percentile must lie in (0, 100]");
    const double p = abs_percentile(values, *clip_percentile);
    lo = std::max(lo, -p);
    hi = std::min(hi, p);
  }
  QuantGrid g;
  g.bits = bits;
  g.scheme = GridScheme::asymmetric_per_tensor;
  const double levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  double scale = (hi - lo) / levels;
  if (!(scale > 0.0))
    scale = 1.0;
  const auto zp = static_cast<std::int64_t>(
    std::clamp(std::nearbyint(-lo / scale), 0.0, levels));
  g.scales = {scale};
  g.zero_points = {zp};
  return g;
}

/// Generic entry point: symmetric grids treat `values` as a single channel.
inline QuantGrid quantize_grid(std::span<const float> values, int bits, GridScheme scheme)
{
  detail::require(!values.empty(), "quantize_grid: empty value set");
  if (scheme == GridScheme::asymmetric_per_tensor)
    return make_activation_grid(values, bits);
  WeightMatrix m(values.size(), 1, std::vector<float>(values.begin(), values.end()));
  return make_weight_grid(m, bits);
}

inline Tensor3 fake_quant_tensor(Tensor3 x, const QuantGrid &grid)
{
  for (float &v : x.data)
    v = static_cast<float>(grid.fake_quant(v));
  return x;
}

} // namespace deconvq
