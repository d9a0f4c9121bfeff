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

// Seeded random fixtures shared by the unit tests and the acceptance binary.

#include "deconvq/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace deconvq::testing
{

inline Tensor3 random_tensor(std::mt19937_64 &rng, std::size_t c, std::size_t h, std::size_t w, float scale = 1.0f)
{
  std::normal_distribution<float> n(0.0f, scale);
  Tensor3 t(c, h, w);
  for (float &v : t.data)
    v = n(rng);
  return t;
}

inline WeightTensor random_weights(std::mt19937_64 &rng, std::size_t ci, std::size_t co, std::size_t k,
                                   float scale = 1.0f)
{
  std::normal_distribution<float> n(0.0f, scale);
  WeightTensor w(ci, co, k, k);
  for (float &v : w.data)
    v = n(rng);
  return w;
}

inline std::vector<float> random_vector(std::mt19937_64 &rng, std::size_t n, float scale = 1.0f)
{
  std::normal_distribution<float> d(0.0f, scale);
  std::vector<float> v(n);
  for (float &x : v)
    x = d(rng);
  return v;
}

/// Positive scales spread log-uniformly over [1/range, range].
inline std::vector<float> random_scales(std::mt19937_64 &rng, std::size_t n, double range = 8.0)
{
  std::uniform_real_distribution<double> u(-std::log(range), std::log(range));
  std::vector<float> v(n);
  for (float &x : v)
    x = static_cast<float>(std::exp(u(rng)));
  return v;
}

inline std::size_t pick(std::mt19937_64 &rng, std::size_t lo, std::size_t hi)
{
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Layer random_layer(std::mt19937_64 &rng, LayerSpec spec, std::size_t ci, std::size_t co)
{
  Layer l;
  l.spec = spec;
  const float scale = 1.0f / std::sqrt(static_cast<float>(ci * spec.kernel * spec.kernel));
  l.weights = random_weights(rng, ci, co, static_cast<std::size_t>(spec.kernel), scale);
  l.bias = random_vector(rng, co, 0.1f);
  return l;
}

/// Random K/S/P transposed-conv layer geometry with K - P - 1 >= 0.
inline LayerSpec random_transposed_spec(std::mt19937_64 &rng, std::optional<float> slope = std::nullopt)
{
  LayerSpec s;
  s.kind = LayerKind::conv_transpose;
  s.kernel = static_cast<int>(pick(rng, 1, 5));
  s.stride = static_cast<int>(pick(rng, 1, 3));
  s.padding = static_cast<int>(pick(rng, 0, static_cast<std::size_t>(s.kernel - 1)));
  s.activation_slope = slope;
  return s;
}

/// Random spatial size in [1, hi] for which a transposed layer gives a nonempty output.
inline std::size_t random_input_size(std::mt19937_64 &rng, const LayerSpec &spec, std::size_t hi)
{
  std::size_t lo = 1;
  while ((static_cast<int>(lo) - 1) * spec.stride - 2 * spec.padding + spec.kernel < 1)
    ++lo;
  return pick(rng, lo, std::max(lo, hi));
}

/// Stack of K4 S2 P1 transposed layers with LeakyReLU between them; channels[i] feeds layer i.
inline DecoderModel random_decoder(std::mt19937_64 &rng, const std::vector<std::size_t> &channels,
                                   float slope = 0.2f)
{
  DecoderModel m;
  for (std::size_t i = 0; i + 1 < channels.size(); ++i)
  {
    const bool last = i + 2 == channels.size();
    LayerSpec s{LayerKind::conv_transpose, 4, 2, 1, last ? std::nullopt : std::optional<float>(slope)};
    m.layers.push_back(random_layer(rng, s, channels[i], channels[i + 1]));
  }
  return m;
}

inline double max_abs_diff(const Tensor3 &a, const Tensor3 &b)
{
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - b.data[i]));
  return m;
}

inline double max_abs_diff(const Tensor3 &a, const std::vector<double> &b)
{
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - b[i]));
  return m;
}

} // namespace deconvq::testing
