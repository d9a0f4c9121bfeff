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

#include "deconvq/report.hpp"
#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace deconvq;
using namespace deconvq::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace
{

fs::path scratch(const std::string &name)
{
  const fs::path p = fs::temp_directory_path() / ("deconvq_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

int run_cli(const std::string &args)
{
  const std::string cmd = std::string(DECONVQ_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path &p)
{
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fast stand-in for the canonical decoder: same latent interface, tiny layers.
DecoderModel small_model(std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  DecoderModel m;
  m.layers.push_back(random_layer(rng, LayerSpec{LayerKind::conv_transpose, 1, 1, 0, 0.2f}, 256, 4));
  m.layers.push_back(random_layer(rng, LayerSpec{LayerKind::conv_transpose, 4, 2, 1, std::nullopt}, 4, 3));
  return m;
}

QualityContext small_context(std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  QualityContext q;
  q.model = random_decoder(rng, {6, 8, 3});
  for (int i = 0; i < 8; ++i)
    q.calib.push_back(random_tensor(rng, 6, 4, 4));
  for (int i = 0; i < 3; ++i)
  {
    q.eval.push_back(random_tensor(rng, 6, 4, 4));
    q.reference.push_back(forward(q.model, q.eval.back()));
  }
  q.peak = max_abs(q.reference);
  q.region = face_region_mask(16, 16);
  q.uv_map = build_uv_map(face_uv_vertices(seed, 512), 16, 16, 1.0f);
  return q;
}

} // namespace

TEST(Config, UnknownKeysAreRejected)
{
  RunConfig c;
  EXPECT_THROW(merge_config(c, json{{"alhpa", 0.5}}), InvalidArgument);
  EXPECT_THROW(merge_config(c, json{{"array", {{"depth", 2}}}}), InvalidArgument);
  EXPECT_THROW(merge_config(c, json{{"latencies", {{"gpu_ms", 2}}}}), InvalidArgument);
  EXPECT_THROW(merge_config(c, json{{"alpha", "high"}}), InvalidArgument);
  EXPECT_THROW(merge_config(c, json{{"array", {{"precision", "fp16"}}}}), InvalidArgument);
  EXPECT_THROW(merge_config(c, json::array()), InvalidArgument);
}

TEST(Config, OverlayAndRoundTrip)
{
  RunConfig c;
  merge_config(c, json{{"alpha", 0.5},
                       {"calib_count", 7},
                       {"act_clip_percentile", nullptr},
                       {"array", {{"precision", "int4"}, {"combining", true}}},
                       {"latencies", {{"render_ms", 4.0}}}});
  EXPECT_EQ(c.alpha, 0.5);
  EXPECT_EQ(c.calib_count, 7u);
  EXPECT_FALSE(c.act_clip_percentile.has_value());
  EXPECT_EQ(c.array.precision, Precision::int4);
  EXPECT_TRUE(c.array.combining);
  EXPECT_EQ(c.latencies.render_ms, 4.0);
  EXPECT_EQ(c.k_percent, 75.0);

  RunConfig d;
  merge_config(d, to_json(c));
  EXPECT_EQ(to_json(d), to_json(c));
}

TEST(Config, DefaultsAndValidation)
{
  RunConfig c;
  EXPECT_EQ(c.calib_count, 512u);
  EXPECT_EQ(c.alpha, 0.8);
  EXPECT_EQ(c.k_percent, 75.0);
  EXPECT_NO_THROW(c.validate());
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = RunConfig{};
  c.weight_bits = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(RunStage, PrefixesStageAndKeepsType)
{
  try
  {
    run_stage("quantize", []() -> int { throw NumericalError("cholesky failed"); });
    FAIL() << "no exception";
  }
  catch (const NumericalError &e)
  {
    EXPECT_EQ(std::string(e.what()), "stage 'quantize': cholesky failed");
  }
  EXPECT_THROW(run_stage("io", []() -> int { throw IoError("x"); }), IoError);
  EXPECT_THROW(run_stage("cfg", []() -> int { throw ShapeError("x"); }), ShapeError);
  EXPECT_EQ(run_stage("ok", [] { return 7; }), 7);
}

TEST(Metrics, PsnrAndWeightedMse)
{
  EXPECT_NEAR(psnr(0.01, 1.0), 20.0, 1e-12);
  EXPECT_TRUE(std::isinf(psnr(0.0, 1.0)));
  EXPECT_TRUE(report::number(psnr(0.0, 1.0)).is_null());
  const Tensor3 a(1, 2, 2, std::vector<float>{0, 0, 0, 0});
  const Tensor3 b(1, 2, 2, std::vector<float>{1, 2, 0, 0});
  EXPECT_DOUBLE_EQ(mse(a, b), 1.25);
  UVImportanceMap m(2, 2, 1.0f);
  m.at(0, 1) = 1.0f;
  EXPECT_DOUBLE_EQ(uv_weighted_mse(a, b, m), 4.0);
}

TEST(ModelIo, RoundTrips)
{
  const fs::path dir = scratch("io");
  std::mt19937_64 rng(81);
  DecoderModel m = random_decoder(rng, {3, 4, 2});
  m.input_transform = {0.5f, 2.0f, 1.0f};
  io::save_model(dir / "model", m);
  const DecoderModel r = io::load_model(dir / "model");
  ASSERT_EQ(r.layers.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i)
  {
    EXPECT_EQ(r.layers[i].weights.data, m.layers[i].weights.data);
    EXPECT_EQ(r.layers[i].bias, m.layers[i].bias);
    EXPECT_EQ(r.layers[i].spec.activation_slope, m.layers[i].spec.activation_slope);
  }
  EXPECT_EQ(r.input_transform, m.input_transform);

  const std::vector<Tensor3> calib{random_tensor(rng, 3, 2, 2), random_tensor(rng, 3, 2, 2)};
  io::save_tensor_set(dir / "calib.tar1", calib);
  const auto back = io::load_tensor_set(dir / "calib.tar1");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].data, calib[1].data);

  const auto q = quantize_model(m, calib, QuantizeOptions{});
  io::save_quantized_model(dir / "quantized", q);
  const auto qr = io::load_quantized_model(dir / "quantized");
  EXPECT_EQ(fake_quant_forward(qr, calib[0]).data, fake_quant_forward(q, calib[0]).data);

  SmoothingPlan plan;
  plan.alpha = 0.6;
  plan.layers.push_back({1, {1.0f, 2.5f, 0.25f, 1.0f}, {0, 3}});
  const SmoothingPlan pr = io::smoothing_plan_from_json(io::smoothing_plan_json(plan));
  EXPECT_EQ(pr.alpha, 0.6);
  EXPECT_EQ(pr.layers[0].scales, plan.layers[0].scales);
  EXPECT_EQ(pr.layers[0].exempt, plan.layers[0].exempt);

  EXPECT_THROW(io::load_model(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST(Flow, VariantsAndBitWidthMonotonicity)
{
  const QualityContext ctx = small_context(82);
  QualityOptions opt;
  opt.with_w8a8 = true;
  const QualityRun run = run_quality(ctx, opt);
  ASSERT_EQ(run.variants.size(), 4u);
  EXPECT_EQ(run.variants.front().name, "full");
  EXPECT_GE(run.variant("full_w8a8").mean_psnr, run.variant("full").mean_psnr);
  EXPECT_EQ(run.layers.size(), 2u);
  EXPECT_THROW(run.variant("nope"), InvalidArgument);

  const QualityRun again = run_quality(ctx, opt);
  EXPECT_EQ(again.variant("full").mse, run.variant("full").mse);
}

TEST(Flow, SimulatorAndPipelineSummaries)
{
  const auto s = simulate_all(canonical_decoder(0), kCanonicalInputSize, kCanonicalInputSize, ArrayConfig{}, 1e9);
  EXPECT_GE(s.speedup, 3.0);
  EXPECT_LE(s.speedup, 4.0);
  EXPECT_DOUBLE_EQ(s.int4_ratio, 4.0);
  const auto p = summarize_pipeline(StageLatencies{}, 32);
  EXPECT_NEAR(p.fps, 100.0, 1e-9);
  EXPECT_NEAR(p.single_frame_ms, 21.5, 1e-12);
  const std::string csv = report::schedule_csv(p.schedule);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "frame,stage,start,end");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 32 * 6);
}

TEST(Cli, ExitCodes)
{
  const fs::path out = scratch("codes");
  EXPECT_EQ(run_cli("pipeline --out " + out.string() + " --frames 16"), 0);
  EXPECT_TRUE(fs::exists(out / "pipeline.json"));
  EXPECT_TRUE(fs::exists(out / "schedule.csv"));
  EXPECT_EQ(run_cli("pipeline --bogus-flag"), 2);
  EXPECT_EQ(run_cli("simulate --alpha 2 --out " + out.string()), 2);
  EXPECT_EQ(run_cli("pipeline --frames 4 --out " + out.string()), 2);
  EXPECT_EQ(run_cli("simulate --precision fp16 --out " + out.string()), 2);

  const fs::path cfg = out / "bad.json";
  std::ofstream(cfg) << R"({"not_a_key": 1})";
  EXPECT_EQ(run_cli("pipeline --config " + cfg.string() + " --out " + out.string()), 2);

  const fs::path empty = scratch("empty");
  fs::create_directories(empty);
  EXPECT_EQ(run_cli("smooth --out " + empty.string()), 4);

  DecoderModel broken = small_model(83);
  broken.layers[0].bias[1] = std::nanf("");
  io::save_model(out / "nan_model", broken);
  EXPECT_EQ(run_cli("run-all --model " + (out / "nan_model").string() + " --calib-count 2 --eval-count 1 --frames 8 --out " +
                    (out / "nan_run").string()),
            3);
  fs::remove_all(out);
  fs::remove_all(empty);
}

TEST(Cli, StagedCommandsProduceTheirFiles)
{
  const fs::path out = scratch("staged");
  const fs::path model = out / "src_model";
  io::save_model(model, small_model(84));
  const std::string common = " --out " + out.string() + " --calib-count 4 --eval-count 2";
  ASSERT_EQ(run_cli("calibrate --model " + model.string() + common), 0);
  for (const char *f : {"model/model.json", "calib.tar1", "region_mask.tar1", "uv_vertices.tar1", "manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  ASSERT_EQ(run_cli("smooth" + common), 0);
  EXPECT_TRUE(fs::exists(out / "smoothing_plan.json"));
  EXPECT_TRUE(fs::exists(out / "smoothed" / "model.json"));
  ASSERT_EQ(run_cli("quantize --method rtn" + common), 0);
  ASSERT_EQ(run_cli("quantize" + common), 0);
  EXPECT_TRUE(fs::exists(out / "quantized"));
  ASSERT_EQ(run_cli("eval" + common), 0);
  EXPECT_TRUE(fs::exists(out / "quality.json"));
  EXPECT_TRUE(fs::exists(out / "quality.csv"));
  ASSERT_EQ(run_cli("simulate --combining off --precision int4" + common), 0);
  const json sim = io::read_json(out / "simulate.json");
  EXPECT_FALSE(sim.empty());
  fs::remove_all(out);
}

TEST(Cli, PipelineOutputIsReproducible)
{
  const fs::path a = scratch("rep_a"), b = scratch("rep_b");
  ASSERT_EQ(run_cli("pipeline --frames 24 --transmit 4 --out " + a.string()), 0);
  ASSERT_EQ(run_cli("pipeline --frames 24 --transmit 4 --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "schedule.csv"), slurp(b / "schedule.csv"));
  EXPECT_NEAR(io::read_json(a / "pipeline.json").at("interval_ms").get<double>(), 9.5, 1e-9);
  fs::remove_all(a);
  fs::remove_all(b);
}
