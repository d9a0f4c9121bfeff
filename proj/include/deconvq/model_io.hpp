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

// On-disk layout. A model directory holds model.json plus one TAR1 file per
// tensor; a quantized model directory adds quant.json and integer weights.

#include "deconvq/errors.hpp"
#include "deconvq/quantize.hpp"
#include "deconvq/smoothing.hpp"
#include "deconvq/tar1.hpp"
#include "deconvq/tensor.hpp"
#include "deconvq/uv_map.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace deconvq::io
{

namespace fs = std::filesystem;
using nlohmann::json;

inline json read_json(const fs::path &path)
{
  std::ifstream f(path);
  if (!f)
    throw IoError("cannot open '" + path.string() + "'");
  try
  {
    return json::parse(f);
  }
  catch (const json::parse_error &e)
  {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path &path, const json &j)
{
  std::ofstream f(path);
  if (!f)
    throw IoError("cannot open '" + path.string() + "' for writing");
  f << j.dump(2) << '\n';
  if (!f)
    throw IoError("write failed for '" + path.string() + "'");
}

inline void ensure_dir(const fs::path &dir)
{
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

// json field access that reports schema problems as I/O errors
template <typename T> T field(const json &j, const char *key)
{
  if (!j.contains(key))
    throw IoError(std::string("missing field '") + key + "'");
  try
  {
    return j.at(key).get<T>();
  }
  catch (const json::exception &e)
  {
    throw IoError(std::string("bad field '") + key + "': " + e.what());
  }
}

inline std::uint32_t dim32(std::size_t v) { return static_cast<std::uint32_t>(v); }

inline void save_tensor(const fs::path &path, const Tensor3 &t)
{
  tar1::write_file(path, tar1::make<float>({dim32(t.channels), dim32(t.height), dim32(t.width)}, t.data));
}

inline Tensor3 load_tensor(const fs::path &path)
{
  const auto a = tar1::read_file(path);
  if (a.dims.size() != 3)
    throw IoError(path.string() + ": expected a rank-3 tensor");
  return Tensor3(a.dims[0], a.dims[1], a.dims[2], a.as<float>());
}

/// Sample stack stored as one (S, C, H, W) archive.
inline void save_tensor_set(const fs::path &path, const std::vector<Tensor3> &set)
{
  detail::require(!set.empty(), "save_tensor_set: empty set");
  std::vector<float> all;
  for (const auto &t : set)
  {
    detail::require_shape(t.same_shape(set.front()), "save_tensor_set: samples differ in shape");
    all.insert(all.end(), t.data.begin(), t.data.end());
  }
  const auto &f = set.front();
  tar1::write_file(path, tar1::make<float>({dim32(set.size()), dim32(f.channels), dim32(f.height), dim32(f.width)},
                                           std::move(all)));
}

inline std::vector<Tensor3> load_tensor_set(const fs::path &path)
{
  const auto a = tar1::read_file(path);
  if (a.dims.size() != 4)
    throw IoError(path.string() + ": expected a rank-4 sample stack");
  const auto &v = a.as<float>();
  const std::size_t per = static_cast<std::size_t>(a.dims[1]) * a.dims[2] * a.dims[3];
  std::vector<Tensor3> out;
  for (std::size_t s = 0; s < a.dims[0]; ++s)
    out.emplace_back(a.dims[1], a.dims[2], a.dims[3],
                     std::vector<float>(v.begin() + static_cast<std::ptrdiff_t>(s * per),
                                        v.begin() + static_cast<std::ptrdiff_t>((s + 1) * per)));
  return out;
}

inline json layer_spec_json(const LayerSpec &s)
{
  json j = {{"kind", to_string(s.kind)}, {"kernel", s.kernel}, {"stride", s.stride}, {"padding", s.padding}};
  j["activation_slope"] = s.activation_slope ? json(*s.activation_slope) : json(nullptr);
  return j;
}

inline LayerSpec layer_spec_from_json(const json &j)
{
  LayerSpec s;
  try
  {
    s.kind = layer_kind_from_string(field<std::string>(j, "kind"));
  }
  catch (const InvalidArgument &e)
  {
    throw IoError(e.what());
  }
  s.kernel = field<int>(j, "kernel");
  s.stride = field<int>(j, "stride");
  s.padding = field<int>(j, "padding");
  if (j.contains("activation_slope") && !j.at("activation_slope").is_null())
    s.activation_slope = field<float>(j, "activation_slope");
  return s;
}

inline void save_model(const fs::path &dir, const DecoderModel &model)
{
  model.validate();
  ensure_dir(dir);
  json j = {{"format", "deconvq-model"}, {"version", 1}, {"layers", json::array()}};
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    const Layer &l = model.layers[i];
    const std::string w = "layer" + std::to_string(i) + ".weights.tar1";
    const std::string b = "layer" + std::to_string(i) + ".bias.tar1";
    tar1::write_file(dir / w, tar1::make<float>({dim32(l.weights.in_channels), dim32(l.weights.out_channels),
                                                 dim32(l.weights.kh), dim32(l.weights.kw)},
                                                l.weights.data));
    tar1::write_file(dir / b, tar1::make<float>({dim32(l.bias.size())}, l.bias));
    json lj = layer_spec_json(l.spec);
    lj["weights"] = w;
    lj["bias"] = b;
    j["layers"].push_back(lj);
  }
  if (!model.input_transform.empty())
  {
    tar1::write_file(dir / "input_transform.tar1",
                     tar1::make<float>({dim32(model.input_transform.size())}, model.input_transform));
    j["input_transform"] = "input_transform.tar1";
  }
  write_json(dir / "model.json", j);
}

inline DecoderModel load_model(const fs::path &dir)
{
  const json j = read_json(dir / "model.json");
  if (field<std::string>(j, "format") != "deconvq-model")
    throw IoError(dir.string() + ": not a deconvq model directory");
  DecoderModel m;
  for (const auto &lj : field<json>(j, "layers"))
  {
    Layer l;
    l.spec = layer_spec_from_json(lj);
    const auto wa = tar1::read_file(dir / field<std::string>(lj, "weights"));
    if (wa.dims.size() != 4)
      throw IoError("layer weights must be rank 4");
    l.weights = WeightTensor(wa.dims[0], wa.dims[1], wa.dims[2], wa.dims[3], wa.as<float>());
    l.bias = tar1::read_file(dir / field<std::string>(lj, "bias")).as<float>();
    m.layers.push_back(std::move(l));
  }
  if (j.contains("input_transform"))
    m.input_transform = tar1::read_file(dir / field<std::string>(j, "input_transform")).as<float>();
  try
  {
    m.validate();
  }
  catch (const Error &e)
  {
    throw IoError(dir.string() + ": inconsistent model: " + e.what());
  }
  return m;
}

inline json smoothing_plan_json(const SmoothingPlan &p)
{
  json j = {{"format", "deconvq-smoothing-plan"}, {"alpha", p.alpha}, {"layers", json::array()}};
  for (const auto &l : p.layers)
    j["layers"].push_back({{"layer_index", l.layer_index}, {"scales", l.scales}, {"exempt", l.exempt}});
  return j;
}

inline SmoothingPlan smoothing_plan_from_json(const json &j)
{
  SmoothingPlan p;
  p.alpha = field<double>(j, "alpha");
  for (const auto &lj : field<json>(j, "layers"))
    p.layers.push_back({field<std::size_t>(lj, "layer_index"), field<std::vector<float>>(lj, "scales"),
                        field<std::vector<std::size_t>>(lj, "exempt")});
  return p;
}

inline json grid_json(const QuantGrid &g)
{
  return {{"bits", g.bits}, {"scheme", to_string(g.scheme)}, {"scales", g.scales}, {"zero_points", g.zero_points}};
}

inline QuantGrid grid_from_json(const json &j)
{
  QuantGrid g;
  g.bits = field<int>(j, "bits");
  const auto scheme = field<std::string>(j, "scheme");
  if (scheme == "symmetric_per_channel")
    g.scheme = GridScheme::symmetric_per_channel;
  else if (scheme == "asymmetric_per_tensor")
    g.scheme = GridScheme::asymmetric_per_tensor;
  else
    throw IoError("unknown grid scheme '" + scheme + "'");
  g.scales = field<std::vector<double>>(j, "scales");
  g.zero_points = field<std::vector<std::int64_t>>(j, "zero_points");
  try
  {
    g.validate();
  }
  catch (const Error &e)
  {
    throw IoError(std::string("bad quantization grid: ") + e.what());
  }
  return g;
}

inline void save_quantized_model(const fs::path &dir, const QuantizedModel &q)
{
  save_model(dir / "reference", q.reference);
  json j = {{"format", "deconvq-quantized"},
            {"weight_bits", q.weight_bits},
            {"act_bits", q.act_bits},
            {"layers", json::array()}};
  for (std::size_t i = 0; i < q.layers.size(); ++i)
  {
    const auto &l = q.layers[i];
    const std::string w = "layer" + std::to_string(i) + ".qweights.tar1";
    tar1::write_file(dir / w, tar1::make<std::int32_t>({dim32(l.weights.rows), dim32(l.weights.cols)}, l.weights.values));
    json lj = {{"weights", w}, {"weight_grid", grid_json(l.weights.grid)}, {"hessian_lambda", l.hessian_lambda}};
    lj["activation_grid"] = l.activation_grid ? grid_json(*l.activation_grid) : json(nullptr);
    j["layers"].push_back(lj);
  }
  write_json(dir / "quant.json", j);
}

inline QuantizedModel load_quantized_model(const fs::path &dir)
{
  const json j = read_json(dir / "quant.json");
  if (field<std::string>(j, "format") != "deconvq-quantized")
    throw IoError(dir.string() + ": not a quantized model directory");
  QuantizedModel q;
  q.reference = load_model(dir / "reference");
  q.weight_bits = field<int>(j, "weight_bits");
  q.act_bits = field<int>(j, "act_bits");
  for (const auto &lj : field<json>(j, "layers"))
  {
    QuantizedLayer l;
    const auto a = tar1::read_file(dir / field<std::string>(lj, "weights"));
    if (a.dims.size() != 2)
      throw IoError("quantized weights must be rank 2");
    l.weights = {a.dims[0], a.dims[1], a.as<std::int32_t>(), grid_from_json(field<json>(lj, "weight_grid"))};
    l.hessian_lambda = field<double>(lj, "hessian_lambda");
    if (!lj.at("activation_grid").is_null())
      l.activation_grid = grid_from_json(lj.at("activation_grid"));
    q.layers.push_back(std::move(l));
  }
  if (q.layers.size() != q.reference.layers.size())
    throw IoError(dir.string() + ": layer count mismatch between quant.json and reference model");
  return q;
}

inline void save_mask(const fs::path &path, const RegionMask &m)
{
  tar1::write_file(path, tar1::make<std::uint8_t>({dim32(m.height), dim32(m.width)}, m.membership));
}

inline RegionMask load_mask(const fs::path &path)
{
  const auto a = tar1::read_file(path);
  if (a.dims.size() != 2)
    throw IoError(path.string() + ": expected a rank-2 mask");
  RegionMask m(a.dims[0], a.dims[1]);
  m.membership = a.as<std::uint8_t>();
  return m;
}

inline void save_uv_vertices(const fs::path &path, const UVVertexSet &v)
{
  std::vector<float> flat;
  for (const auto &p : v.uv)
    flat.insert(flat.end(), {p[0], p[1]});
  tar1::write_file(path, tar1::make<float>({dim32(v.uv.size()), 2}, std::move(flat)));
}

inline UVVertexSet load_uv_vertices(const fs::path &path)
{
  const auto a = tar1::read_file(path);
  if (a.dims.size() != 2 || a.dims[1] != 2)
    throw IoError(path.string() + ": expected an (N, 2) UV array");
  UVVertexSet v;
  const auto &f = a.as<float>();
  for (std::size_t i = 0; i < a.dims[0]; ++i)
    v.uv.push_back({f[2 * i], f[2 * i + 1]});
  return v;
}

} // namespace deconvq::io
