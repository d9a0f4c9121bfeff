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

// JSON and CSV renderings of flow results. Non-finite numbers (PSNR of an exact
// match) are written as JSON null.

#include "deconvq/flow.hpp"
#include "deconvq/model_io.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace deconvq::report
{

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char *kReportFormat = "deconvq-report/1";

inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json numbers(const std::vector<double> &v)
{
  json a = json::array();
  for (double x : v)
    a.push_back(number(x));
  return a;
}

inline json to_json(const VariantMetrics &v)
{
  return {{"name", v.name},
          {"weight_bits", v.weight_bits},
          {"act_bits", v.act_bits},
          {"mse", numbers(v.mse)},
          {"psnr_db", numbers(v.psnr)},
          {"uv_mse", numbers(v.uv_mse)},
          {"mean_mse", number(v.mean_mse)},
          {"mean_psnr_db", number(v.mean_psnr)},
          {"mean_uv_mse", number(v.mean_uv_mse)}};
}

inline json to_json(const LayerQuantError &e)
{
  return {{"layer", e.layer},
          {"weight_rel_error", number(e.weight_rel_error)},
          {"hessian_lambda", number(e.hessian_lambda)},
          {"act_scale", number(e.act_scale)},
          {"act_zero_point", e.act_zero_point},
          {"exempt_channels", e.exempt_channels}};
}

inline json to_json(const ArrayConfig &c)
{
  return {{"rows", c.rows},
          {"cols", c.cols},
          {"precision", to_string(c.precision)},
          {"int4_multiplier", c.int4_multiplier},
          {"combining", c.combining}};
}

inline json to_json(const LayerSimReport &l)
{
  return {{"name", l.name},
          {"combining_used", l.combining_used},
          {"d", l.d},
          {"d_eff", l.d_eff},
          {"n", l.n},
          {"c_out", l.c_out},
          {"segments", l.segments},
          {"base_cycles", l.base_cycles},
          {"cycles", l.cycles},
          {"macs_issued", l.macs_issued},
          {"useful_macs", l.useful_macs},
          {"skipped_macs", l.skipped_macs},
          {"geometric_macs", l.geometric_macs},
          {"utilization", number(l.utilization)}};
}

inline json to_json(const SimReport &r)
{
  json layers = json::array();
  for (const auto &l : r.layers)
    layers.push_back(to_json(l));
  return {{"config", to_json(r.config)},
          {"clock_hz", r.clock_hz},
          {"layers", layers},
          {"total_cycles", r.total_cycles},
          {"total_base_cycles", r.total_base_cycles},
          {"macs_issued", r.macs_issued},
          {"useful_macs", r.useful_macs},
          {"skipped_macs", r.skipped_macs},
          {"geometric_macs", r.geometric_macs},
          {"utilization", number(r.utilization)},
          {"latency_s", r.latency_s}};
}

inline json to_json(const SimulatorSummary &s)
{
  return {{"baseline_int8", to_json(s.baseline_int8)},
          {"combining_int8", to_json(s.combining_int8)},
          {"combining_int4", to_json(s.combining_int4)},
          {"speedup", number(s.speedup)},
          {"int4_ratio", number(s.int4_ratio)}};
}

inline json to_json(const StageLatencies &l)
{
  return {{"sensor_ms", l.sensor_ms},
          {"encode_ms", l.encode_ms},
          {"transmit_ms", l.transmit_ms},
          {"decode_ms", l.decode_ms},
          {"render_ms", l.render_ms}};
}

inline json to_json(const Schedule &s)
{
  json jobs = json::array();
  for (std::size_t k = 0; k < s.frames; ++k)
    for (std::size_t i = 0; i < kStageCount; ++i)
    {
      const auto st = static_cast<Stage>(i);
      const Interval &iv = s.at(k, st);
      jobs.push_back({{"frame", k}, {"stage", to_string(st)}, {"start_ms", iv.start}, {"end_ms", iv.end}});
    }
  return {{"latencies", to_json(s.latencies)}, {"frames", s.frames}, {"jobs", jobs}};
}

inline json to_json(const PipelineSummary &p)
{
  return {{"interval_ms", p.interval_ms},
          {"fps", number(p.fps)},
          {"single_frame_ms", p.single_frame_ms},
          {"bottleneck_ms", p.bottleneck_ms},
          {"schedule", to_json(p.schedule)}};
}

inline json to_json(const EvalReport &r)
{
  json variants = json::array(), layers = json::array();
  for (const auto &v : r.quality.variants)
    variants.push_back(to_json(v));
  for (const auto &l : r.quality.layers)
    layers.push_back(to_json(l));
  return {{"format", kReportFormat},
          {"psnr_reference", {{"kind", "float_output_max_abs"}, {"peak", r.psnr_peak}}},
          {"config", deconvq::to_json(r.config)},
          {"quality", {{"variants", variants}, {"layers", layers}, {"smoothing_plan", io::smoothing_plan_json(r.quality.plan)}}},
          {"simulator", to_json(r.simulator)},
          {"pipeline", to_json(r.pipeline)}};
}

/// Every seed and hyperparameter needed to rerun the flow bit-identically.
inline json manifest(const RunConfig &cfg)
{
  return {{"format", "deconvq-manifest/1"},
          {"seeds",
           {{"model", cfg.seed}, {"calib", cfg.calib_seed}, {"eval", cfg.eval_seed}, {"fixture", cfg.fixture_seed}}},
          {"config", deconvq::to_json(cfg)}};
}

inline std::string fmt(double v)
{
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_text(const fs::path &path, const std::string &text)
{
  std::ofstream f(path);
  if (!f)
    throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f)
    throw IoError("write failed for '" + path.string() + "'");
}

/// Gantt rows: frame, stage, start, end (milliseconds).
inline std::string schedule_csv(const Schedule &s)
{
  std::ostringstream os;
  os << "frame,stage,start,end\n";
  for (std::size_t k = 0; k < s.frames; ++k)
    for (std::size_t i = 0; i < kStageCount; ++i)
    {
      const auto st = static_cast<Stage>(i);
      os << k << ',' << to_string(st) << ',' << fmt(s.at(k, st).start) << ',' << fmt(s.at(k, st).end) << '\n';
    }
  return os.str();
}

inline std::string layers_csv(const SimulatorSummary &s, const std::vector<LayerQuantError> &q)
{
  std::ostringstream os;
  os << "layer,d,d_eff,n,c_out,segments,baseline_cycles,combining_cycles,int4_cycles,useful_macs,"
        "skipped_macs,weight_rel_error,exempt_channels\n";
  for (std::size_t i = 0; i < s.baseline_int8.layers.size(); ++i)
  {
    const auto &b = s.baseline_int8.layers[i], &c = s.combining_int8.layers[i], &f = s.combining_int4.layers[i];
    os << i << ',' << c.d << ',' << c.d_eff << ',' << c.n << ',' << c.c_out << ',' << c.segments << ','
       << fmt(b.cycles) << ',' << fmt(c.cycles) << ',' << fmt(f.cycles) << ',' << c.useful_macs << ','
       << c.skipped_macs << ',';
    if (i < q.size())
      os << fmt(q[i].weight_rel_error) << ',' << q[i].exempt_channels;
    else
      os << ',';
    os << '\n';
  }
  return os.str();
}

inline std::string quality_csv(const QualityRun &q)
{
  std::ostringstream os;
  os << "variant,weight_bits,act_bits,view,mse,psnr_db,uv_mse\n";
  for (const auto &v : q.variants)
    for (std::size_t i = 0; i < v.mse.size(); ++i)
      os << v.name << ',' << v.weight_bits << ',' << v.act_bits << ',' << i << ',' << fmt(v.mse[i]) << ','
         << fmt(v.psnr[i]) << ',' << fmt(v.uv_mse[i]) << '\n';
  return os.str();
}

/// report.json, manifest.json, layers.csv, quality.csv and schedule.csv under `dir`.
inline void write_reports(const fs::path &dir, const EvalReport &r)
{
  io::ensure_dir(dir);
  io::write_json(dir / "report.json", to_json(r));
  io::write_json(dir / "manifest.json", manifest(r.config));
  write_text(dir / "layers.csv", layers_csv(r.simulator, r.quality.layers));
  write_text(dir / "quality.csv", quality_csv(r.quality));
  write_text(dir / "schedule.csv", schedule_csv(r.pipeline.schedule));
}

} // namespace deconvq::report
