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

// Deterministic toy decoder, latent generator and face-region fixtures.
// Everything is driven by std::mt19937_64 so a seed fully determines the data
// on a given standard library.

#include "deconvq/smoothing.hpp"
#include "deconvq/tensor.hpp"
#include "deconvq/uv_map.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace deconvq
{

struct CanonicalOptions
{
  double outlier_fraction = 0.02; // share of channels amplified
  float outlier_gain = 16.0f;
  float leaky_slope = 0.2f;
};

inline constexpr std::array<std::size_t, 7> kCanonicalChannels = {256, 128, 64, 32, 16, 8, 3};
inline constexpr std::size_t kCanonicalInputSize = 2;
inline constexpr std::size_t kCanonicalOutputSize = 128;

namespace detail
{

// Separate streams per purpose so adding a draw in one place does not shift another.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose)
{
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline std::vector<std::size_t> pick_channels(std::mt19937_64 &rng, std::size_t count, double fraction)
{
  const auto n = std::min(count, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(count))));
  std::vector<std::size_t> all(count);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(n);
  std::sort(all.begin(), all.end());
  return all;
}

inline double mean_square_gain(std::size_t channels, std::size_t outliers, double gain)
{
  return (static_cast<double>(channels - outliers) + static_cast<double>(outliers) * gain * gain) /
         static_cast<double>(channels);
}

} // namespace detail

/// Latent channels carrying the injected outliers for a given model seed.
inline std::vector<std::size_t> latent_outlier_channels(std::uint64_t seed, const CanonicalOptions &opt = {})
{
  auto rng = detail::stream(seed, 100);
  return detail::pick_channels(rng, kCanonicalChannels[0], opt.outlier_fraction);
}

/// Six K=4, S=2, P=1 transposed convolutions, 256x2x2 -> 3x128x128. Weight scale
/// keeps the mean activation power near 1 through the outlier channels.
inline DecoderModel canonical_decoder(std::uint64_t seed, const CanonicalOptions &opt = {})
{
  auto rng = detail::stream(seed, 1);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float slope = opt.leaky_slope;
  DecoderModel m;
  std::size_t in_outliers = latent_outlier_channels(seed, opt).size();
  for (std::size_t i = 0; i + 1 < kCanonicalChannels.size(); ++i)
  {
    const std::size_t ci = kCanonicalChannels[i], co = kCanonicalChannels[i + 1];
    const bool last = i + 2 == kCanonicalChannels.size();
    Layer l;
    l.spec = LayerSpec{LayerKind::conv_transpose, 4, 2, 1, last ? std::nullopt : std::optional<float>(slope)};
    // each output sums ci * (K/S)^2 = 4 ci taps
    const double gain2 = detail::mean_square_gain(ci, in_outliers, opt.outlier_gain);
    const auto stddev = static_cast<float>(std::sqrt(2.0 / (1.0 + slope * slope) / (4.0 * ci) / gain2));
    l.weights = WeightTensor(ci, co, 4, 4);
    for (float &w : l.weights.data)
      w = stddev * normal(rng);
    l.bias.resize(co);
    for (float &b : l.bias)
      b = 0.05f * normal(rng);
    in_outliers = 0;
    if (!last)
    {
      const auto amplified = detail::pick_channels(rng, co, opt.outlier_fraction);
      for (std::size_t c : amplified)
      {
        for (std::size_t cin = 0; cin < ci; ++cin)
          for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x)
              l.weights.at(cin, c, y, x) *= opt.outlier_gain;
        l.bias[c] *= opt.outlier_gain;
      }
      in_outliers = amplified.size();
    }
    m.layers.push_back(std::move(l));
  }
  m.validate();
  return m;
}

/// Gaussian latents with the model's outlier channels amplified.
inline std::vector<Tensor3> sample_latents(std::uint64_t model_seed, std::uint64_t sample_seed, std::size_t count,
                                           const CanonicalOptions &opt = {})
{
  auto rng = detail::stream(sample_seed, 2);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const auto outliers = latent_outlier_channels(model_seed, opt);
  std::vector<Tensor3> out;
  for (std::size_t s = 0; s < count; ++s)
  {
    Tensor3 x(kCanonicalChannels[0], kCanonicalInputSize, kCanonicalInputSize);
    for (float &v : x.data)
      v = normal(rng);
    for (std::size_t c : outliers)
      for (std::size_t i = 0; i < x.plane(); ++i)
        x.data[c * x.plane() + i] *= opt.outlier_gain;
    out.push_back(std::move(x));
  }
  return out;
}

struct Ellipse
{
  double cy, cx, ry, rx; // fractions of the frame

  bool contains(double y, double x) const
  {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

/// Two eyes and a mouth.
inline constexpr std::array<Ellipse, 3> kFaceRegions = {{
  {0.38, 0.32, 0.07, 0.11},
  {0.38, 0.68, 0.07, 0.11},
  {0.72, 0.50, 0.08, 0.20},
}};

inline RegionMask face_region_mask(std::size_t h = kCanonicalOutputSize, std::size_t w = kCanonicalOutputSize)
{
  RegionMask m(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
    {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      m.set(y, x, std::any_of(kFaceRegions.begin(), kFaceRegions.end(),
                              [&](const Ellipse &e) { return e.contains(fy, fx); }));
    }
  return m;
}

/// Vertex UVs: `face_share` of them inside the face regions, the rest uniform.
inline UVVertexSet face_uv_vertices(std::uint64_t seed, std::size_t count = 4096, double face_share = 0.7)
{
  auto rng = detail::stream(seed, 3);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::uniform_int_distribution<std::size_t> region(0, kFaceRegions.size() - 1);
  UVVertexSet v;
  const auto in_face = static_cast<std::size_t>(std::round(face_share * static_cast<double>(count)));
  for (std::size_t i = 0; i < count; ++i)
  {
    if (i < in_face)
    {
      const Ellipse &e = kFaceRegions[region(rng)];
      for (;;)
      {
        const float u = unit(rng), w = unit(rng);
        const double y = e.cy + (2.0 * u - 1.0) * e.ry, x = e.cx + (2.0 * w - 1.0) * e.rx;
        if (e.contains(y, x))
        {
          v.uv.push_back({static_cast<float>(y), static_cast<float>(x)});
          break;
        }
      }
    }
    else
      v.uv.push_back({unit(rng), unit(rng)});
  }
  return v;
}

} // namespace deconvq
