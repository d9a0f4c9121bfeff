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

// deconvq command-line driver.
//
// Stages exchange files through the output directory:
//   calibrate -> model/, calib.tar1, region_mask.tar1, uv_vertices.tar1
//   smooth    -> smoothed/, smoothing_plan.json
//   quantize  -> quantized/
//   eval      -> quality.json, quality.csv
//   simulate  -> simulate.json
//   pipeline  -> pipeline.json, schedule.csv
//   run-all   -> report.json, manifest.json, layers.csv, quality.csv, schedule.csv
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.

#include "deconvq/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deconvq;

namespace
{

enum ExitCode
{
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kNumerical = 3,
  kIo = 4
};

// Flag values and whether each was given; given flags override the config file.
struct Flags
{
  std::string config_path;
  RunConfig cli;
  std::vector<std::function<void(RunConfig &)>> overrides;

  // simulate
  std::string combining = "on";
  std::string precision = "int8";
  std::size_t input_size = kCanonicalInputSize;
  // quantize
  std::string method = "gptq";
  bool no_uv = false;
  // pipeline
  std::string gantt;
};

template <typename T, typename Member>
CLI::Option *add_override(CLI::App &app, Flags &f, const std::string &name, T &storage, Member apply,
                          const std::string &help)
{
  CLI::Option *opt = app.add_option(name, storage, help);
  f.overrides.push_back([opt, &storage, apply](RunConfig &c) {
    if (opt->count() > 0)
      apply(c, storage);
  });
  return opt;
}

RunConfig resolve_config(const Flags &f)
{
  RunConfig c;
  if (!f.config_path.empty())
  {
    json j;
    try
    {
      j = io::read_json(f.config_path);
    }
    catch (const IoError &e)
    {
      throw InvalidArgument(std::string("config file: ") + e.what());
    }
    merge_config(c, j);
  }
  for (const auto &apply : f.overrides)
    apply(c);
  c.validate();
  return c;
}

fs::path out_dir(const RunConfig &c) { return fs::path(c.output_dir); }

DecoderModel source_model(const RunConfig &c)
{
  return c.model_dir.empty() ? canonical_decoder(c.seed, c.canonical) : io::load_model(c.model_dir);
}

void print(const json &j) { std::cout << j.dump(2) << '\n'; }

int cmd_calibrate(const RunConfig &c)
{
  const fs::path out = out_dir(c);
  io::ensure_dir(out);
  const DecoderModel model = run_stage("calibrate", [&] { return source_model(c); });
  const auto calib = run_stage("calibrate", [&] { return sample_latents(c.seed, c.calib_seed, c.calib_count, c.canonical); });
  detail::require_shape(model.input_channels() == calib.front().channels,
                        "calibrate: model input channels do not match the latent generator");
  const Tensor3 y = forward(model, calib.front());
  io::save_model(out / "model", model);
  io::save_tensor_set(out / "calib.tar1", calib);
  io::save_mask(out / "region_mask.tar1", face_region_mask(y.height, y.width));
  io::save_uv_vertices(out / "uv_vertices.tar1", face_uv_vertices(c.fixture_seed, c.uv_vertex_count));
  io::write_json(out / "manifest.json", report::manifest(c));
  print({{"stage", "calibrate"},
         {"output_dir", out.string()},
         {"samples", calib.size()},
         {"output_shape", {y.channels, y.height, y.width}}});
  return kOk;
}

int cmd_smooth(const RunConfig &c)
{
  const fs::path out = out_dir(c);
  const DecoderModel model = io::load_model(c.model_dir.empty() ? out / "model" : fs::path(c.model_dir));
  const auto calib = io::load_tensor_set(out / "calib.tar1");
  SmoothingOptions so;
  so.alpha = c.alpha;
  so.k_percent = c.k_percent;
  so.region = io::load_mask(out / "region_mask.tar1");
  const SmoothingPlan plan = run_stage("smooth", [&] { return plan_smoothing(model, calib, so); });
  const DecoderModel smoothed = run_stage("smooth", [&] { return apply_smoothing(model, plan); });
  io::save_model(out / "smoothed", smoothed);
  io::write_json(out / "smoothing_plan.json", io::smoothing_plan_json(plan));
  json exempt = json::array();
  for (const auto &l : plan.layers)
    exempt.push_back(l.exempt.size());
  print({{"stage", "smooth"}, {"alpha", plan.alpha}, {"exempt_per_layer", exempt}});
  return kOk;
}

int cmd_quantize(const RunConfig &c, const Flags &f)
{
  const fs::path out = out_dir(c);
  const fs::path src = c.model_dir.empty() ? out / "smoothed" : fs::path(c.model_dir);
  const DecoderModel model = io::load_model(src);
  const auto calib = io::load_tensor_set(out / "calib.tar1");
  QuantizeOptions qo;
  qo.weight_bits = c.weight_bits;
  qo.act_bits = c.act_bits;
  qo.method = weight_method_from_string(f.method);
  qo.lambda_frac = c.lambda_frac;
  qo.act_clip_percentile = c.act_clip_percentile;
  if (!f.no_uv && qo.method == WeightMethod::gptq)
  {
    const Tensor3 y = forward(model, calib.front());
    qo.uv_map = build_uv_map(io::load_uv_vertices(out / "uv_vertices.tar1"), y.height, y.width, c.w_max);
  }
  const QuantizedModel q = run_stage("quantize", [&] { return quantize_model(model, calib, qo); });
  io::save_quantized_model(out / "quantized", q);
  json lambdas = json::array();
  for (const auto &l : q.layers)
    lambdas.push_back(l.hessian_lambda);
  print({{"stage", "quantize"},
         {"source", src.string()},
         {"method", to_string(qo.method)},
         {"uv_weighted", qo.uv_map.has_value()},
         {"weight_bits", q.weight_bits},
         {"act_bits", q.act_bits},
         {"hessian_lambda", lambdas}});
  return kOk;
}

int cmd_eval(const RunConfig &c)
{
  const fs::path out = out_dir(c);
  const QuantizedModel q = io::load_quantized_model(out / "quantized");
  QualityContext ctx;
  ctx.model = q.reference;
  ctx.eval = sample_latents(c.seed, c.eval_seed, c.eval_count, c.canonical);
  detail::require_shape(ctx.model.input_channels() == ctx.eval.front().channels,
                        "eval: model input channels do not match the latent generator");
  for (const auto &x : ctx.eval)
    ctx.reference.push_back(forward(ctx.model, x));
  ctx.peak = max_abs(ctx.reference);
  if (!(ctx.peak > 0.0))
    ctx.peak = 1.0;
  const Tensor3 &y = ctx.reference.front();
  ctx.uv_map = build_uv_map(io::load_uv_vertices(out / "uv_vertices.tar1"), y.height, y.width, c.w_max);
  QualityRun run;
  run.variants.push_back(run_stage("eval", [&] { return evaluate_quantized("quantized", q, ctx); }));
  run.layers = layer_errors(q, nullptr);
  json layers = json::array();
  for (const auto &l : run.layers)
    layers.push_back(report::to_json(l));
  const json j = {{"psnr_reference", {{"kind", "float_output_max_abs"}, {"peak", ctx.peak}}},
                  {"variant", report::to_json(run.variants.front())},
                  {"layers", layers}};
  io::write_json(out / "quality.json", j);
  report::write_text(out / "quality.csv", report::quality_csv(run));
  print(j);
  return kOk;
}

int cmd_simulate(const RunConfig &c, const Flags &f)
{
  const fs::path out = out_dir(c);
  ArrayConfig cfg = c.array;
  if (f.combining != "on" && f.combining != "off")
    throw InvalidArgument("--combining must be 'on' or 'off'");
  cfg.combining = f.combining == "on";
  cfg.precision = precision_from_string(f.precision);
  cfg.validate();
  fs::path model_path = c.model_dir;
  if (model_path.empty() && fs::exists(out / "model" / "model.json"))
    model_path = out / "model";
  const DecoderModel model = model_path.empty() ? canonical_decoder(c.seed, c.canonical) : io::load_model(model_path);
  const SimReport r = run_stage("simulate", [&] {
    return simulate_decoder(model, f.input_size, f.input_size, cfg, c.clock_hz);
  });
  json j = report::to_json(r);
  j["model"] = model_path.empty() ? json("canonical") : json(model_path.string());
  io::ensure_dir(out);
  io::write_json(out / "simulate.json", j);
  print(j);
  return kOk;
}

int cmd_pipeline(const RunConfig &c, const Flags &f)
{
  const fs::path out = out_dir(c);
  const PipelineSummary p = run_stage("pipeline", [&] { return summarize_pipeline(c.latencies, c.frames); });
  const json j = report::to_json(p);
  io::ensure_dir(out);
  io::write_json(out / "pipeline.json", j);
  const std::string csv = report::schedule_csv(p.schedule);
  report::write_text(f.gantt.empty() ? out / "schedule.csv" : fs::path(f.gantt), csv);
  print({{"interval_ms", p.interval_ms},
         {"fps", report::number(p.fps)},
         {"single_frame_ms", p.single_frame_ms},
         {"bottleneck_ms", p.bottleneck_ms},
         {"frames", p.schedule.frames}});
  return kOk;
}

int cmd_run_all(const RunConfig &c)
{
  const EvalReport r = run_full_flow(c);
  report::write_reports(out_dir(c), r);
  const auto &full = r.quality.variant("full");
  print({{"output_dir", c.output_dir},
         {"full_mean_mse", report::number(full.mean_mse)},
         {"full_mean_psnr_db", report::number(full.mean_psnr)},
         {"speedup", report::number(r.simulator.speedup)},
         {"fps", report::number(r.pipeline.fps)}});
  return kOk;
}

} // namespace

int main(int argc, char **argv)
{
  CLI::App app{"deconvq: smoothing, UV-weighted GPTQ, accelerator and pipeline simulation for transposed-conv decoders"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config_path, "JSON config file; flags override its values");

  auto &d = f.cli;
  auto add_common = [&](CLI::App &sub) {
    add_override(sub, f, "--out", d.output_dir, [](RunConfig &c, const std::string &v) { c.output_dir = v; }, "output directory");
    add_override(sub, f, "--model", d.model_dir, [](RunConfig &c, const std::string &v) { c.model_dir = v; }, "model directory (default: canonical decoder or the stage's input)");
    add_override(sub, f, "--seed", d.seed, [](RunConfig &c, std::uint64_t v) { c.seed = v; }, "canonical model seed");
    add_override(sub, f, "--calib-seed", d.calib_seed, [](RunConfig &c, std::uint64_t v) { c.calib_seed = v; }, "calibration latent seed");
    add_override(sub, f, "--eval-seed", d.eval_seed, [](RunConfig &c, std::uint64_t v) { c.eval_seed = v; }, "evaluation latent seed");
    add_override(sub, f, "--fixture-seed", d.fixture_seed, [](RunConfig &c, std::uint64_t v) { c.fixture_seed = v; }, "UV vertex fixture seed");
    add_override(sub, f, "--calib-count", d.calib_count, [](RunConfig &c, std::size_t v) { c.calib_count = v; }, "calibration samples");
    add_override(sub, f, "--eval-count", d.eval_count, [](RunConfig &c, std::size_t v) { c.eval_count = v; }, "evaluation samples");
    add_override(sub, f, "--alpha", d.alpha, [](RunConfig &c, double v) { c.alpha = v; }, "smoothing migration exponent");
    add_override(sub, f, "--k-percent", d.k_percent, [](RunConfig &c, double v) { c.k_percent = v; }, "share of highest-variance channels exempt from smoothing");
    add_override(sub, f, "--w-max", d.w_max, [](RunConfig &c, float v) { c.w_max = v; }, "UV importance ceiling");
    add_override(sub, f, "--lambda-frac", d.lambda_frac, [](RunConfig &c, double v) { c.lambda_frac = v; }, "Hessian damping as a fraction of the mean diagonal");
    add_override(sub, f, "--wbits", d.weight_bits, [](RunConfig &c, int v) { c.weight_bits = v; }, "weight bits");
    add_override(sub, f, "--abits", d.act_bits, [](RunConfig &c, int v) { c.act_bits = v; }, "activation bits");
    add_override(sub, f, "--clock-hz", d.clock_hz, [](RunConfig &c, double v) { c.clock_hz = v; }, "accelerator clock for latency reports");
    add_override(sub, f, "--frames", d.frames, [](RunConfig &c, std::size_t v) { c.frames = v; }, "pipeline horizon in frames");
  };

  auto *calibrate = app.add_subcommand("calibrate", "build or load the model and write calibration data and fixtures");
  auto *smooth = app.add_subcommand("smooth", "plan and fuse channel smoothing");
  auto *quantize = app.add_subcommand("quantize", "quantize the smoothed model");
  auto *eval = app.add_subcommand("eval", "fake-quant evaluation of the quantized model");
  auto *simulate = app.add_subcommand("simulate", "systolic-array cycle simulation");
  auto *pipeline = app.add_subcommand("pipeline", "sensor/encode/transmit/decode/render schedule");
  auto *run_all = app.add_subcommand("run-all", "every stage end to end with reports");
  for (auto *sub : {calibrate, smooth, quantize, eval, simulate, pipeline, run_all})
    add_common(*sub);

  quantize->add_option("--method", f.method, "weight rounding: gptq or rtn")->check(CLI::IsMember({"gptq", "rtn"}));
  quantize->add_flag("--no-uv", f.no_uv, "unweighted Hessian");

  simulate->add_option("--combining", f.combining, "input combining")->check(CLI::IsMember({"on", "off"}));
  simulate->add_option("--precision", f.precision, "int8 or int4")->check(CLI::IsMember({"int8", "int4"}));
  simulate->add_option("--input-size", f.input_size, "latent spatial size");
  add_override(*simulate, f, "--rows", d.array.rows, [](RunConfig &c, std::size_t v) { c.array.rows = v; }, "array rows");
  add_override(*simulate, f, "--cols", d.array.cols, [](RunConfig &c, std::size_t v) { c.array.cols = v; }, "array columns");
  add_override(*simulate, f, "--int4-multiplier", d.array.int4_multiplier, [](RunConfig &c, double v) { c.array.int4_multiplier = v; }, "int4 throughput multiplier");

  add_override(*pipeline, f, "--sensor", d.latencies.sensor_ms, [](RunConfig &c, double v) { c.latencies.sensor_ms = v; }, "sensor latency (ms)");
  add_override(*pipeline, f, "--encode", d.latencies.encode_ms, [](RunConfig &c, double v) { c.latencies.encode_ms = v; }, "encode latency (ms)");
  add_override(*pipeline, f, "--transmit", d.latencies.transmit_ms, [](RunConfig &c, double v) { c.latencies.transmit_ms = v; }, "one-way transmit latency (ms)");
  add_override(*pipeline, f, "--decode", d.latencies.decode_ms, [](RunConfig &c, double v) { c.latencies.decode_ms = v; }, "decode latency (ms)");
  add_override(*pipeline, f, "--render", d.latencies.render_ms, [](RunConfig &c, double v) { c.latencies.render_ms = v; }, "render latency (ms)");
  pipeline->add_option("--gantt", f.gantt, "Gantt CSV path (default: <out>/schedule.csv)");

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError &e)
  {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try
  {
    const RunConfig c = resolve_config(f);
    if (*calibrate)
      return cmd_calibrate(c);
    if (*smooth)
      return cmd_smooth(c);
    if (*quantize)
      return cmd_quantize(c, f);
    if (*eval)
      return cmd_eval(c);
    if (*simulate)
      return cmd_simulate(c, f);
    if (*pipeline)
      return cmd_pipeline(c, f);
    return cmd_run_all(c);
  }
  catch (const InvalidArgument &e)
  {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  catch (const ShapeError &e)
  {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  catch (const NumericalError &e)
  {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  }
  catch (const IoError &e)
  {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  }
  catch (const std::exception &e)
  {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
