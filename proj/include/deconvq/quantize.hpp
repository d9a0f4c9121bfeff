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
#include "deconvq/gptq.hpp"
#include "deconvq/quant_grid.hpp"
#include "deconvq/uv_map.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deconvq
{

enum class WeightMethod
{
  rtn,
  gptq
};

inline const char *to_string(WeightMethod m) { return m == WeightMethod::rtn ? "rtn" : "gptq"; }

inline WeightMethod weight_method_from_string(const std::string &s)
{
  if (s == "rtn")
    return WeightMethod::rtn;
  if (s == "gptq")
    return WeightMethod::gptq;
  throw InvalidArgument("unknown weight method '" + s + "'");
}

struct QuantizeOptions
{
  int weight_bits = 4;
  int act_bits = 4;
  WeightMethod method = WeightMethod::gptq;
  double lambda_frac = 0.01;
  GptqUpdateRule rule = GptqUpdateRule::inverse_cholesky;
  std::optional<UVImportanceMap> uv_map; // unset: unweighted Hessian
  std::optional<double> act_clip_percentile = 99.9;
};

struct QuantizedLayer
{
  QuantizedWeights weights;
  std::optional<QuantGrid> activation_grid;
  double hessian_lambda = 0.0;
};

/// Float reference model (topology, biases, input transform) plus integer weights.
struct QuantizedModel
{
  DecoderModel reference;
  std::vector<QuantizedLayer> layers;
  int weight_bits = 4;
  int act_bits = 4;

  /// Float model with every weight replaced by its dequantized grid value.
  DecoderModel dequantized() const
  {
    detail::require(layers.size() == reference.layers.size(), "QuantizedModel: layer count mismatch");
    DecoderModel m = reference;
    for (std::size_t i = 0; i < layers.size(); ++i)
    {
      Layer &l = m.layers[i];
      l.weights = fold_weights(layers[i].weights.dequantize(), l.spec.kind, l.weights.in_channels,
                               l.weights.kh);
    }
    return m;
  }
};

/// Layer-major calibration inputs: inputs[i][s] feeds layer i for sample s.
using LayerInputs = std::vector<std::vector<Tensor3>>;

inline LayerInputs collect_layer_inputs(const DecoderModel &model, std::span<const Tensor3> calib)
{
  detail::require(!calib.empty(), "collect_layer_inputs: empty calibration set");
  LayerInputs out(model.layers.size());
  for (const Tensor3 &x : calib)
  {
    ForwardTrace t = forward_trace(model, x);
    for (std::size_t i = 0; i < model.layers.size(); ++i)
      out[i].push_back(std::move(t.inputs[i]));
  }
  return out;
}

inline QuantGrid calibrate_activation_grid(std::span<const Tensor3> inputs, int bits,
                                           std::optional<double> clip)
{
  std::vector<float> all;
  for (const Tensor3 &x : inputs)
    all.insert(all.end(), x.data.begin(), x.data.end());
  return make_activation_grid(all, bits, clip);
}

inline QuantizedModel quantize_model(const DecoderModel &model, const LayerInputs &inputs,
                                     const QuantizeOptions &opt)
{
  model.validate();
  detail::require_bits(opt.weight_bits);
  detail::require_bits(opt.act_bits);
  detail::require(inputs.size() == model.layers.size(), "quantize_model: layer input count mismatch");

  QuantizedModel q;
  q.reference = model;
  q.weight_bits = opt.weight_bits;
  q.act_bits = opt.act_bits;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    const Layer &layer = model.layers[i];
    const WeightMatrix w = unfold_weights(layer);
    const QuantGrid grid = make_weight_grid(w, opt.weight_bits);
    QuantizedLayer ql;
    if (opt.method == WeightMethod::gptq)
    {
      const WeightedHessian h = weighted_hessian(layer.spec, inputs[i],
                                                 opt.uv_map ? &*opt.uv_map : nullptr, opt.lambda_frac);
      ql.weights = gptq_quantize(w, h, grid, opt.rule);
      ql.hessian_lambda = h.lambda;
    }
    else
    {
      ql.weights = rtn_quantize(w, grid);
    }
    ql.activation_grid = calibrate_activation_grid(inputs[i], opt.act_bits, opt.act_clip_percentile);
    q.layers.push_back(std::move(ql));
  }
  return q;
}

inline QuantizedModel quantize_model(const DecoderModel &model, std::span<const Tensor3> calib,
                                     const QuantizeOptions &opt)
{
  return quantize_model(model, collect_layer_inputs(model, calib), opt);
}

/// Forward pass on a dequantized model with every layer input fake-quantized.
inline Tensor3 fake_quant_forward(const DecoderModel &dequantized, std::span<const QuantizedLayer> layers,
                                  const Tensor3 &x)
{
  detail::require(layers.size() == dequantized.layers.size(), "fake_quant_forward: layer count mismatch");
  Tensor3 cur = model_input(dequantized, x);
  for (std::size_t i = 0; i < layers.size(); ++i)
  {
    if (!layers[i].activation_grid)
      throw InvalidArgument("fake_quant_forward: layer " + std::to_string(i) +
                            " has no calibrated activation grid");
    cur = apply_layer(dequantized.layers[i], fake_quant_tensor(std::move(cur), *layers[i].activation_grid));
  }
  return cur;
}

inline Tensor3 fake_quant_forward(const QuantizedModel &q, const Tensor3 &x)
{
  return fake_quant_forward(q.dequantized(), q.layers, x);
}

} // namespace deconvq
