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

// End-to-end flow: calibrate, smooth, quantize, evaluate, simulate, schedule.

#include "deconvq/accelsim.hpp"
#include "deconvq/canonical.hpp"
#include "deconvq/conv.hpp"
#include "deconvq/model_io.hpp"
#include "deconvq/pipeline.hpp"
#include "deconvq/quantize.hpp"
#include "deconvq/smoothing.hpp"
#include "deconvq/uv_map.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace deconvq
{

inline double mse(const Tensor3 &a, const Tensor3 &b)
{
  detail::require_shape(a.same_shape(b), "mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
  {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

/// Squared error weighted per pixel by the importance map, normalized by total weight.
inline double uv_weighted_mse(const Tensor3 &a, const Tensor3 &b, const UVImportanceMap &map)
{
  detail::require_shape(a.same_shape(b), "uv_weighted_mse: shape mismatch");
  const UVImportanceMap m = downsample_uv(map, a.height, a.width);
  double acc = 0.0, weight = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c)
    for (std::size_t i = 0; i < a.plane(); ++i)
    {
      const double d = static_cast<double>(a.data[c * a.plane() + i]) - b.data[c * a.plane() + i];
      acc += m.weights[i] * d * d;
      weight += m.weights[i];
    }
  detail::require(weight > 0.0, "uv_weighted_mse: importance map is all zero");
  return acc / weight;
}

/// 10 log10(peak^2 / mse); +inf for identical outputs.
inline double psnr(double mse_value, double peak)
{
  detail::require(peak > 0.0, "psnr: peak must be positive");
  if (mse_value <= 0.0)
    return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse_value);
}

inline double max_abs(std::span<const Tensor3> set)
{
  double m = 0.0;
  for (const auto &t : set)
    for (float v : t.data)
      m = std::max(m, static_cast<double>(std::fabs(v)));
  return m;
}

struct RunConfig
{
  std::string model_dir; // empty: canonical generator
  std::uint64_t seed = 0;
  std::uint64_t calib_seed = 1;
  std::uint64_t eval_seed = 2;
  std::uint64_t fixture_seed = 3;
  std::size_t calib_count = 512;
  std::size_t eval_count = 8;
  double alpha = 0.8;
  double k_percent = 75.0;
  float w_max = 1.0f;
  double lambda_frac = 0.01;
  int weight_bits = 4;
  int act_bits = 4;
  std::optional<double> act_clip_percentile = 99.9;
  std::size_t uv_vertex_count = 4096;
  CanonicalOptions canonical;
  ArrayConfig array;
  double clock_hz = 1e9;
  StageLatencies latencies;
  std::size_t frames = 64;
  std::string output_dir = "deconvq_out";

  void validate() const
  {
    detail::require(calib_count >= 1, "config: calib_count must be >= 1");
    detail::require(eval_count >= 1, "config: eval_count must be >= 1");
    detail::require(alpha >= 0.0 && alpha <= 1.0, "config: alpha must lie in [0, 1]");
    detail::require(k_percent >= 0.0 && k_percent <= 100.0, "config: k_percent must lie in [0, 100]");
    detail::require(w_max > 0.0f, "config: w_max must be positive");
    detail::require(lambda_frac > 0.0, "config: lambda_frac must be positive");
    detail::require_bits(weight_bits);
    detail::require_bits(act_bits);
    if (act_clip_percentile)
      detail::require(*act_clip_percentile > 0.0 && *act_clip_percentile <= 100.0,
                      "config: act_clip_percentile must lie in (0, 100]");
    detail::require(uv_vertex_count >= 1, "config: uv_vertex_count must be >= 1");
    detail::require(canonical.outlier_fraction >= 0.0 && canonical.outlier_fraction <= 1.0,
                    "config: outlier_fraction must lie in [0, 1]");
    detail::require(canonical.outlier_gain > 0.0f, "config: outlier_gain must be positive");
    array.validate();
    detail::require(clock_hz > 0.0, "config: clock_hz must be positive");
    latencies.validate();
    detail::require(frames >= 8, "config: frames must be >= 8 for a steady-state estimate");
    if (!model_dir.empty())
      detail::require(std::filesystem::exists(std::filesystem::path(model_dir) / "model.json"),
                      "config: model_dir '" + model_dir + "' has no model.json");
  }
};

inline nlohmann::json to_json(const RunConfig &c)
{
  nlohmann::json j;
  j["model_dir"] = c.model_dir;
  j["seed"] = c.seed;
  j["calib_seed"] = c.calib_seed;
  j["eval_seed"] = c.eval_seed;
  j["fixture_seed"] = c.fixture_seed;
  j["calib_count"] = c.calib_count;
  j["eval_count"] = c.eval_count;
  j["alpha"] = c.alpha;
  j["k_percent"] = c.k_percent;
  j["w_max"] = c.w_max;
  j["lambda_frac"] = c.lambda_frac;
  j["weight_bits"] = c.weight_bits;
  j["act_bits"] = c.act_bits;
  j["act_clip_percentile"] = c.act_clip_percentile ? nlohmann::json(*c.act_clip_percentile) : nlohmann::json();
  j["uv_vertex_count"] = c.uv_vertex_count;
  j["outlier_fraction"] = c.canonical.outlier_fraction;
  j["outlier_gain"] = c.canonical.outlier_gain;
  j["array"] = {{"rows", c.array.rows},
                {"cols", c.array.cols},
                {"precision", to_string(c.array.precision)},
                {"int4_multiplier", c.array.int4_multiplier},
                {"combining", c.array.combining}};
  j["clock_hz"] = c.clock_hz;
  j["latencies"] = {{"sensor_ms", c.latencies.sensor_ms},
                    {"encode_ms", c.latencies.encode_ms},
                    {"transmit_ms", c.latencies.transmit_ms},
                    {"decode_ms", c.latencies.decode_ms},
                    {"render_ms", c.latencies.render_ms}};
  j["frames"] = c.frames;
  j["output_dir"] = c.output_dir;
  return j;
}

/// Overlays the keys present in `j` onto `c`; unknown keys are rejected.
inline void merge_config(RunConfig &c, const nlohmann::json &j)
{
  if (!j.is_object())
    throw InvalidArgument("config: top level must be a JSON object");
  auto get = [&](const nlohmann::json &obj, const std::string &key, auto &dst) {
    try
    {
      dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
    }
    catch (const nlohmann::json::exception &e)
    {
      throw InvalidArgument("config: bad value for '" + key + "': " + e.what());
    }
  };
  for (const auto &[key, value] : j.items())
  {
    if (key == "model_dir") get(j, key, c.model_dir);
    else if (key == "seed") get(j, key, c.seed);
    else if (key == "calib_seed") get(j, key, c.calib_seed);
    else if (key == "eval_seed") get(j, key, c.eval_seed);
    else if (key == "fixture_seed") get(j, key, c.fixture_seed);
    else if (key == "calib_count") get(j, key, c.calib_count);
    else if (key == "eval_count") get(j, key, c.eval_count);
    else if (key == "alpha") get(j, key, c.alpha);
    else if (key == "k_percent") get(j, key, c.k_percent);
    else if (key == "w_max") get(j, key, c.w_max);
    else if (key == "lambda_frac") get(j, key, c.lambda_frac);
    else if (key == "weight_bits") get(j, key, c.weight_bits);
    else if (key == "act_bits") get(j, key, c.act_bits);
    else if (key == "act_clip_percentile")
    {
      if (value.is_null())
        c.act_clip_percentile.reset();
      else
      {
        double p = 0.0;
        get(j, key, p);
        c.act_clip_percentile = p;
      }
    }
    else if (key == "uv_vertex_count") get(j, key, c.uv_vertex_count);
    else if (key == "outlier_fraction") get(j, key, c.canonical.outlier_fraction);
    else if (key == "outlier_gain") get(j, key, c.canonical.outlier_gain);
    else if (key == "clock_hz") get(j, key, c.clock_hz);
    else if (key == "frames") get(j, key, c.frames);
    else if (key == "output_dir") get(j, key, c.output_dir);
    else if (key == "array")
    {
      for (const auto &[k, v] : value.items())
      {
        if (k == "rows") get(value, k, c.array.rows);
        else if (k == "cols") get(value, k, c.array.cols);
        else if (k == "int4_multiplier") get(value, k, c.array.int4_multiplier);
        else if (k == "combining") get(value, k, c.array.combining);
        else if (k == "precision")
        {
          std::string p;
          get(value, k, p);
          c.array.precision = precision_from_string(p);
        }
        else
          throw InvalidArgument("config: unknown key 'array." + k + "'");
      }
    }
    else if (key == "latencies")
    {
      for (const auto &[k, v] : value.items())
      {
        if (k == "sensor_ms") get(value, k, c.latencies.sensor_ms);
        else if (k == "encode_ms") get(value, k, c.latencies.encode_ms);
        else if (k == "transmit_ms") get(value, k, c.latencies.transmit_ms);
        else if (k == "decode_ms") get(value, k, c.latencies.decode_ms);
        else if (k == "render_ms") get(value, k, c.latencies.render_ms);
        else
          throw InvalidArgument("config: unknown key 'latencies." + k + "'");
      }
    }
    else
      throw InvalidArgument("config: unknown key '" + key + "'");
  }
}

/// Rethrows a module error with the failing stage prepended, keeping its type.
template <typename F> auto run_stage(const std::string &stage, F &&fn) -> decltype(fn())
{
  const std::string p = "stage '" + stage + "': ";
  try
  {
    return fn();
  }
  catch (const NumericalError &e)
  {
    throw NumericalError(p + e.what());
  }
  catch (const IoError &e)
  {
    throw IoError(p + e.what());
  }
  catch (const ShapeError &e)
  {
    throw ShapeError(p + e.what());
  }
  catch (const InvalidArgument &e)
  {
    throw InvalidArgument(p + e.what());
  }
  catch (const CompactionInfeasible &e)
  {
    throw CompactionInfeasible(p + e.what());
  }
  catch (const Error &e)
  {
    throw Error(p + e.what());
  }
}

/// Model, data and fixtures shared by every quantization variant of one run.
struct QualityContext
{
  DecoderModel model;
  std::vector<Tensor3> calib;
  std::vector<Tensor3> eval;
  std::vector<Tensor3> reference; // float outputs on `eval`
  double peak = 1.0;
  RegionMask region;
  UVImportanceMap uv_map;
};

inline QualityContext make_quality_context(const RunConfig &cfg)
{
  QualityContext q;
  q.model = cfg.model_dir.empty() ? canonical_decoder(cfg.seed, cfg.canonical) : io::load_model(cfg.model_dir);
  q.calib = sample_latents(cfg.seed, cfg.calib_seed, cfg.calib_count, cfg.canonical);
  q.eval = sample_latents(cfg.seed, cfg.eval_seed, cfg.eval_count, cfg.canonical);
  detail::require_shape(q.model.input_channels() == q.calib.front().channels,
                        "model input channels do not match the latent generator");
  for (const auto &x : q.eval)
    q.reference.push_back(forward(q.model, x));
  q.peak = max_abs(q.reference);
  if (!(q.peak > 0.0))
    q.peak = 1.0;
  const auto &out = q.reference.front();
  q.region = face_region_mask(out.height, out.width);
  q.uv_map = build_uv_map(face_uv_vertices(cfg.fixture_seed, cfg.uv_vertex_count), out.height, out.width,
                          cfg.w_max);
  return q;
}

struct VariantMetrics
{
  std::string name;
  int weight_bits = 0;
  int act_bits = 0;
  std::vector<double> mse;
  std::vector<double> psnr;
  std::vector<double> uv_mse;
  double mean_mse = 0.0;
  double mean_psnr = 0.0;
  double mean_uv_mse = 0.0;
};

inline VariantMetrics evaluate_quantized(const std::string &name, const QuantizedModel &q, const QualityContext &ctx)
{
  VariantMetrics v;
  v.name = name;
  v.weight_bits = q.weight_bits;
  v.act_bits = q.act_bits;
  const DecoderModel deq = q.dequantized();
  for (std::size_t i = 0; i < ctx.eval.size(); ++i)
  {
    const Tensor3 y = fake_quant_forward(deq, q.layers, ctx.eval[i]);
    v.mse.push_back(mse(y, ctx.reference[i]));
    v.psnr.push_back(psnr(v.mse.back(), ctx.peak));
    v.uv_mse.push_back(uv_weighted_mse(y, ctx.reference[i], ctx.uv_map));
  }
  const auto n = static_cast<double>(ctx.eval.size());
  for (std::size_t i = 0; i < ctx.eval.size(); ++i)
  {
    v.mean_mse += v.mse[i] / n;
    v.mean_uv_mse += v.uv_mse[i] / n;
  }
  v.mean_psnr = psnr(v.mean_mse, ctx.peak);
  return v;
}

struct LayerQuantError
{
  std::size_t layer = 0;
  double weight_rel_error = 0.0; // ||W - Q(W)||_F / ||W||_F on the smoothed weights
  double hessian_lambda = 0.0;
  double act_scale = 0.0;
  std::int64_t act_zero_point = 0;
  std::size_t exempt_channels = 0;
};

inline std::vector<LayerQuantError> layer_errors(const QuantizedModel &q, const SmoothingPlan *plan)
{
  std::vector<LayerQuantError> out;
  for (std::size_t i = 0; i < q.layers.size(); ++i)
  {
    const WeightMatrix w = unfold_weights(q.reference.layers[i]);
    const WeightMatrix d = q.layers[i].weights.dequantize();
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < w.data.size(); ++k)
    {
      const double e = static_cast<double>(w.data[k]) - d.data[k];
      num += e * e;
      den += static_cast<double>(w.data[k]) * w.data[k];
    }
    LayerQuantError le;
    le.layer = i;
    le.weight_rel_error = den > 0.0 ? std::sqrt(num / den) : 0.0;
    le.hessian_lambda = q.layers[i].hessian_lambda;
    if (q.layers[i].activation_grid)
    {
      le.act_scale = q.layers[i].activation_grid->scales.front();
      le.act_zero_point = q.layers[i].activation_grid->zero_points.front();
    }
    if (plan && i < plan->layers.size())
      le.exempt_channels = plan->layers[i].exempt.size();
    out.push_back(le);
  }
  return out;
}

struct QualityOptions
{
  int weight_bits = 4;
  int act_bits = 4;
  double alpha = 0.8;
  double k_percent = 75.0;
  double lambda_frac = 0.01;
  std::optional<double> act_clip_percentile = 99.9;
  bool with_unweighted = true; // smoothed GPTQ without the UV map
  bool with_rtn = true;        // plain round-to-nearest, no smoothing
  bool with_w8a8 = false;      // full flow at 8/8 bits
};

struct QualityRun
{
  SmoothingPlan plan;
  QuantizedModel full;
  std::vector<VariantMetrics> variants; // "full" first
  std::vector<LayerQuantError> layers;

  const VariantMetrics &variant(const std::string &name) const
  {
    for (const auto &v : variants)
      if (v.name == name)
        return v;
    throw InvalidArgument("no quantization variant named '" + name + "'");
  }
};

/// ICAS + FFAS smoothing, UV-weighted GPTQ, and the requested reference variants.
inline QualityRun run_quality(const QualityContext &ctx, const QualityOptions &opt)
{
  QualityRun run;
  SmoothingOptions so;
  so.alpha = opt.alpha;
  so.k_percent = opt.k_percent;
  so.region = ctx.region;
  run.plan = run_stage("smooth", [&] { return plan_smoothing(ctx.model, ctx.calib, so); });
  const DecoderModel smoothed = run_stage("smooth", [&] { return apply_smoothing(ctx.model, run.plan); });
  const LayerInputs inputs = run_stage("calibrate", [&] { return collect_layer_inputs(smoothed, ctx.calib); });

  QuantizeOptions qo;
  qo.weight_bits = opt.weight_bits;
  qo.act_bits = opt.act_bits;
  qo.method = WeightMethod::gptq;
  qo.lambda_frac = opt.lambda_frac;
  qo.act_clip_percentile = opt.act_clip_percentile;
  qo.uv_map = ctx.uv_map;
  run.full = run_stage("quantize", [&] { return quantize_model(smoothed, inputs, qo); });
  run.variants.push_back(run_stage("eval", [&] { return evaluate_quantized("full", run.full, ctx); }));
  run.layers = layer_errors(run.full, &run.plan);

  if (opt.with_unweighted)
  {
    QuantizeOptions u = qo;
    u.uv_map.reset();
    const auto q = run_stage("quantize", [&] { return quantize_model(smoothed, inputs, u); });
    run.variants.push_back(run_stage("eval", [&] { return evaluate_quantized("gptq_unweighted", q, ctx); }));
  }
  if (opt.with_rtn)
  {
    QuantizeOptions r = qo;
    r.method = WeightMethod::rtn;
    r.uv_map.reset();
    const auto q = run_stage("quantize", [&] { return quantize_model(ctx.model, ctx.calib, r); });
    run.variants.push_back(run_stage("eval", [&] { return evaluate_quantized("rtn", q, ctx); }));
  }
  if (opt.with_w8a8)
  {
    QuantizeOptions w8 = qo;
    w8.weight_bits = 8;
    w8.act_bits = 8;
    const auto q = run_stage("quantize", [&] { return quantize_model(smoothed, inputs, w8); });
    run.variants.push_back(run_stage("eval", [&] { return evaluate_quantized("full_w8a8", q, ctx); }));
  }
  return run;
}

struct SimulatorSummary
{
  SimReport baseline_int8;
  SimReport combining_int8;
  SimReport combining_int4;
  double speedup = 0.0;    // baseline int8 cycles / combining int8 cycles
  double int4_ratio = 0.0; // combining int8 latency / combining int4 latency
};

inline SimulatorSummary simulate_all(const DecoderModel &model, std::size_t in_h, std::size_t in_w,
                                     const ArrayConfig &base_cfg, double clock_hz)
{
  SimulatorSummary s;
  ArrayConfig c = base_cfg;
  c.precision = Precision::int8;
  c.combining = false;
  s.baseline_int8 = simulate_decoder(model, in_h, in_w, c, clock_hz);
  c.combining = true;
  s.combining_int8 = simulate_decoder(model, in_h, in_w, c, clock_hz);
  c.precision = Precision::int4;
  s.combining_int4 = simulate_decoder(model, in_h, in_w, c, clock_hz);
  s.speedup = s.baseline_int8.total_cycles / s.combining_int8.total_cycles;
  s.int4_ratio = s.combining_int8.latency_s / s.combining_int4.latency_s;
  return s;
}

struct PipelineSummary
{
  Schedule schedule;
  double interval_ms = 0.0;
  double fps = 0.0;
  double single_frame_ms = 0.0;
  double bottleneck_ms = 0.0;
};

inline PipelineSummary summarize_pipeline(const StageLatencies &lat, std::size_t frames)
{
  PipelineSummary p;
  p.schedule = schedule(lat, frames);
  p.interval_ms = steady_state_interval(p.schedule);
  p.fps = steady_state_fps(p.schedule);
  p.single_frame_ms = schedule(lat, 1).frame_latency(0);
  p.bottleneck_ms = bottleneck_interval(lat);
  return p;
}

struct EvalReport
{
  RunConfig config;
  double psnr_peak = 0.0;
  QualityRun quality;
  SimulatorSummary simulator;
  PipelineSummary pipeline;
};

inline EvalReport run_full_flow(const RunConfig &cfg)
{
  run_stage("config", [&] { cfg.validate(); });
  EvalReport rep;
  rep.config = cfg;
  const QualityContext ctx = run_stage("calibrate", [&] { return make_quality_context(cfg); });
  rep.psnr_peak = ctx.peak;
  QualityOptions qo;
  qo.weight_bits = cfg.weight_bits;
  qo.act_bits = cfg.act_bits;
  qo.alpha = cfg.alpha;
  qo.k_percent = cfg.k_percent;
  qo.lambda_frac = cfg.lambda_frac;
  qo.act_clip_percentile = cfg.act_clip_percentile;
  qo.with_w8a8 = true;
  rep.quality = run_quality(ctx, qo);
  const Tensor3 &x0 = ctx.eval.front();
  rep.simulator = run_stage("simulate", [&] {
    return simulate_all(rep.quality.full.dequantized(), x0.height, x0.width, cfg.array, cfg.clock_hz);
  });
  rep.pipeline = run_stage("pipeline", [&] { return summarize_pipeline(cfg.latencies, cfg.frames); });
  return rep;
}

} // namespace deconvq
