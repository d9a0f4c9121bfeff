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

#include "deconvq/quantize.hpp"
#include "deconvq/smoothing.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace deconvq;
using namespace deconvq::testing;

namespace
{

const LayerSpec kPointwise{LayerKind::conv_transpose, 1, 1, 0, std::nullopt};

// Pixels drawn as mix * z with z standard normal; optional second mixing
// matrix used for pixels outside `inside`.
Tensor3 mixed_input(std::mt19937_64 &rng, const std::vector<double> &mix, const std::vector<double> *outside,
                    const RegionMask *inside, std::size_t d, std::size_t h, std::size_t w)
{
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor3 x(d, h, w);
  std::vector<double> z(d);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t v = 0; v < w; ++v)
    {
      for (auto &e : z)
        e = n(rng);
      const auto &a = (inside && !inside->at(y, v)) ? *outside : mix;
      for (std::size_t c = 0; c < d; ++c)
      {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k)
          acc += a[c * d + k] * z[k];
        x.at(c, y, v) = static_cast<float>(acc);
      }
    }
  return x;
}

std::vector<double> random_mix(std::mt19937_64 &rng, std::size_t d)
{
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(d * d);
  for (auto &e : a)
    e = n(rng);
  return a;
}

// sum over pixels (optionally weighted) of ||(W - Wq)^T x||^2 for a pointwise layer.
double output_error(const WeightMatrix &w, const WeightMatrix &wq, const std::vector<Tensor3> &xs,
                    const std::vector<float> *pixel_weight = nullptr)
{
  double total = 0.0;
  for (const auto &x : xs)
    for (std::size_t i = 0; i < x.plane(); ++i)
    {
      const double pw = pixel_weight ? (*pixel_weight)[i] : 1.0;
      if (pw == 0.0)
        continue;
      for (std::size_t c = 0; c < w.cols; ++c)
      {
        double e = 0.0;
        for (std::size_t r = 0; r < w.rows; ++r)
          e += (static_cast<double>(w.at(r, c)) - wq.at(r, c)) * x.data[r * x.plane() + i];
        total += pw * e * e;
      }
    }
  return total;
}

WeightMatrix random_matrix(std::mt19937_64 &rng, std::size_t rows, std::size_t cols)
{
  return WeightMatrix(rows, cols, random_vector(rng, rows * cols));
}

WeightedHessian hessian_from(const Eigen::MatrixXd &m)
{
  WeightedHessian h;
  h.matrix = m;
  h.sample_count = 1;
  return h;
}

double mse(const Tensor3 &a, const Tensor3 &b)
{
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

} // namespace

TEST(UvMap, HandNormalization)
{
  UVVertexSet v{{{0.1f, 0.1f}, {0.1f, 0.1f}, {0.6f, 0.6f}}};
  const auto m = build_uv_map(v, 2, 2, 1.0f);
  EXPECT_EQ(m.weights, (std::vector<float>{1.0f, 0.0f, 0.0f, 0.5f}));
}

TEST(UvMap, SingleTexelHit)
{
  UVVertexSet v{{{0.3f, 0.7f}, {0.3f, 0.7f}, {0.3f, 0.7f}, {0.3f, 0.7f}}};
  const auto m = build_uv_map(v, 4, 4, 1.0f);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      EXPECT_EQ(m.at(y, x), (y == 1 && x == 2) ? 1.0f : 0.0f);
}

TEST(UvMap, UnitCoordinateClampsToLastTexel)
{
  UVVertexSet v{{{1.0f, 1.0f}}};
  const auto m = build_uv_map(v, 3, 3, 2.0f);
  EXPECT_EQ(m.at(2, 2), 2.0f);
}

TEST(UvMap, RejectsOutOfRangeAndEmpty)
{
  EXPECT_THROW(build_uv_map(UVVertexSet{{{1.1f, 0.0f}}}, 2, 2), InvalidArgument);
  EXPECT_THROW(build_uv_map(UVVertexSet{{{0.5f, -0.01f}}}, 2, 2), InvalidArgument);
  EXPECT_THROW(build_uv_map(UVVertexSet{}, 2, 2), InvalidArgument);
}

TEST(UvMap, MatchesCountingOracleAndRange)
{
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int t = 0; t < 10; ++t)
  {
    UVVertexSet v;
    const std::size_t count = pick(rng, 1, 300);
    for (std::size_t i = 0; i < count; ++i)
      v.uv.push_back({u(rng) * u(rng), u(rng)});
    const std::size_t h = pick(rng, 1, 9), w = pick(rng, 1, 9);
    const auto m = build_uv_map(v, h, w, 1.5f);
    const auto ref = oracle::uv_map(v.uv, h, w, 1.5);
    float peak = 0.0f;
    for (std::size_t i = 0; i < h * w; ++i)
    {
      EXPECT_NEAR(m.weights[i], ref[i], 1e-6);
      EXPECT_EQ(m.weights[i] == 0.0f, ref[i] == 0.0);
      EXPECT_GE(m.weights[i], 0.0f);
      EXPECT_LE(m.weights[i], 1.5f);
      peak = std::max(peak, m.weights[i]);
    }
    EXPECT_EQ(peak, 1.5f);
  }
}

TEST(DownsampleUv, QuadrantAveraging)
{
  UVImportanceMap m(4, 4, 1.0f);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      m.at(y, x) = 0.75f;
  const auto d = downsample_uv(m, 2, 2);
  EXPECT_EQ(d.weights, (std::vector<float>{0.75f, 0.0f, 0.0f, 0.0f}));
}

TEST(DownsampleUv, ConstantAndIdentity)
{
  UVImportanceMap c(6, 10, 1.0f, 0.4f);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 5}, {4, 7}, {1, 1}, {6, 10}})
    for (float v : downsample_uv(c, h, w).weights)
      EXPECT_NEAR(v, 0.4f, 1e-6);
  std::mt19937_64 rng(42);
  UVImportanceMap r(5, 3, 1.0f);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto &v : r.weights)
    v = u(rng);
  EXPECT_EQ(downsample_uv(r, 5, 3).weights, r.weights);
}

TEST(WeightedHessian, MatchesOracleOnLoweredInputs)
{
  std::mt19937_64 rng(43);
  for (int t = 0; t < 10; ++t)
  {
    const LayerSpec s = random_transposed_spec(rng);
    const std::size_t c = pick(rng, 1, 3), hh = random_input_size(rng, s, 4), ww = random_input_size(rng, s, 4);
    std::vector<Tensor3> xs;
    const std::size_t samples = pick(rng, 1, 3);
    for (std::size_t i = 0; i < samples; ++i)
      xs.push_back(random_tensor(rng, c, hh, ww));
    UVImportanceMap map(hh, ww, 1.0f);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto &v : map.weights)
      v = u(rng);

    std::vector<std::vector<std::vector<double>>> lowered;
    for (const auto &x : xs)
      lowered.push_back(oracle::lowered(apply_uv_weighting(x, map), s.kernel, s.stride, s.padding));
    double lambda = 0.0;
    const auto ref = oracle::hessian(lowered, 0.01, &lambda);
    const WeightedHessian h = weighted_hessian(s, xs, &map, 0.01);
    ASSERT_EQ(h.dim(), ref.size());
    EXPECT_NEAR(h.lambda, lambda, 1e-9 * (1.0 + lambda));
    for (std::size_t i = 0; i < ref.size(); ++i)
      for (std::size_t j = 0; j < ref.size(); ++j)
      {
        EXPECT_NEAR(h.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), ref[i][j],
                    1e-9 * (1.0 + std::fabs(ref[i][j])));
        EXPECT_NEAR(h.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                    h.matrix(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)), 1e-9);
      }
    EXPECT_NO_THROW(inverse_cholesky_upper(h.matrix));
  }
}

TEST(WeightedHessian, HandComputedTwoByTwo)
{
  // Channel 0 = [5 2 1 0], channel 1 = [0 -1 0 -1]: X X^T = [[30, -2], [-2, 2]].
  const std::vector<Tensor3> xs{Tensor3(2, 2, 2, std::vector<float>{5, 2, 1, 0, 0, -1, 0, -1})};
  const WeightedHessian h = weighted_hessian(kPointwise, xs, nullptr, 0.01);
  EXPECT_DOUBLE_EQ(h.lambda, 0.32);
  EXPECT_NEAR(h.matrix(0, 0), 60.32, 1e-12);
  EXPECT_NEAR(h.matrix(0, 1), -4.0, 1e-12);
  EXPECT_NEAR(h.matrix(1, 0), -4.0, 1e-12);
  EXPECT_NEAR(h.matrix(1, 1), 4.32, 1e-12);
}

TEST(WeightedHessian, UniformMapEqualsUnweighted)
{
  std::mt19937_64 rng(44);
  const LayerSpec s{LayerKind::conv_transpose, 4, 2, 1, std::nullopt};
  const std::vector<Tensor3> xs{random_tensor(rng, 3, 4, 4), random_tensor(rng, 3, 4, 4)};
  const UVImportanceMap ones(8, 8, 1.0f, 1.0f); // downsampled to 4x4 on the fly
  const auto a = weighted_hessian(s, xs, &ones, 0.01), b = weighted_hessian(s, xs, nullptr, 0.01);
  EXPECT_LE((a.matrix - b.matrix).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WeightedHessian, ZeroMapGivesDampedIdentity)
{
  std::mt19937_64 rng(45);
  const std::vector<Tensor3> xs{random_tensor(rng, 3, 4, 4)};
  const UVImportanceMap zeros(4, 4, 1.0f, 0.0f);
  const auto h = weighted_hessian(kPointwise, xs, &zeros, 0.05);
  EXPECT_EQ(h.lambda, 0.05);
  EXPECT_TRUE(h.matrix.isApprox(0.05 * Eigen::MatrixXd::Identity(3, 3)));
}

TEST(WeightedHessian, RejectsEmptyAndUndamped)
{
  const std::vector<Tensor3> xs{Tensor3(1, 2, 2)};
  EXPECT_THROW(weighted_hessian(kPointwise, {}, nullptr, 0.01), InvalidArgument);
  EXPECT_THROW(weighted_hessian(kPointwise, xs, nullptr, 0.0), InvalidArgument);
}

TEST(QuantGridTest, SymmetricFourBitScale)
{
  const WeightMatrix w(3, 1, {-1.0f, 0.25f, 1.0f});
  const QuantGrid g = make_weight_grid(w, 4);
  EXPECT_DOUBLE_EQ(g.scales[0], 1.0 / 7.0);
  EXPECT_EQ(g.qmin(), -8);
  EXPECT_EQ(g.qmax(), 7);
  EXPECT_EQ(g.quantize(1.0), 7);
  EXPECT_EQ(g.quantize(-1.0), -7);
}

TEST(QuantGridTest, ZeroValuesAreExact)
{
  const std::vector<float> z{0.0f};
  for (GridScheme s : {GridScheme::symmetric_per_channel, GridScheme::asymmetric_per_tensor})
  {
    const QuantGrid g = quantize_grid(z, 4, s);
    EXPECT_EQ(g.scales[0], 1.0);
    EXPECT_EQ(g.fake_quant(0.0), 0.0);
  }
}

TEST(QuantGridTest, RoundTripWithinHalfStep)
{
  std::mt19937_64 rng(46);
  for (int bits : {4, 8})
  {
    const WeightMatrix w = random_matrix(rng, 20, 5);
    const QuantGrid g = make_weight_grid(w, bits);
    for (std::size_t r = 0; r < 20; ++r)
      for (std::size_t c = 0; c < 5; ++c)
        EXPECT_LE(std::fabs(g.fake_quant(w.at(r, c), c) - w.at(r, c)), g.scales[c] / 2 + 1e-12);
    const auto v = random_vector(rng, 200);
    const QuantGrid a = make_activation_grid(v, bits, std::nullopt);
    for (float x : v)
      EXPECT_LE(std::fabs(a.fake_quant(x) - x), a.scales[0] / 2 + 1e-9);
  }
}

TEST(QuantGridTest, RejectsBadBits)
{
  const WeightMatrix w(1, 1, {1.0f});
  EXPECT_THROW(make_weight_grid(w, 1), InvalidArgument);
  EXPECT_THROW(make_weight_grid(w, 33), InvalidArgument);
}

TEST(Gptq, MatchesExplicitInverseOracle)
{
  std::mt19937_64 rng(47);
  for (int t = 0; t < 20; ++t)
  {
    const std::size_t d = pick(rng, 2, 12), cols = pick(rng, 1, 5);
    const WeightMatrix w = random_matrix(rng, d, cols);
    const Tensor3 x = mixed_input(rng, random_mix(rng, d), nullptr, nullptr, d, 4, 4);
    const std::vector<Tensor3> xs{x};
    const WeightedHessian h = weighted_hessian(kPointwise, xs, nullptr, 0.01);
    const QuantGrid g = make_weight_grid(w, 4);
    const QuantizedWeights q = gptq_quantize(w, h, g);

    std::vector<std::vector<double>> ow(d, std::vector<double>(cols)), oh(d, std::vector<double>(d));
    for (std::size_t r = 0; r < d; ++r)
    {
      for (std::size_t c = 0; c < cols; ++c)
        ow[r][c] = w.at(r, c);
      for (std::size_t j = 0; j < d; ++j)
        oh[r][j] = h.matrix(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
    }
    oracle::obq_sweep(ow, oh, [&](std::size_t, std::size_t c, double v) { return g.fake_quant(v, c); });
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        EXPECT_NEAR(g.dequantize(q.at(r, c), c), ow[r][c], 1e-9);
  }
}

TEST(Gptq, IdentityHessianIsRoundToNearest)
{
  std::mt19937_64 rng(48);
  const WeightMatrix w = random_matrix(rng, 9, 4);
  const QuantGrid g = make_weight_grid(w, 4);
  const auto a = gptq_quantize(w, hessian_from(Eigen::MatrixXd::Identity(9, 9)), g);
  EXPECT_EQ(a.values, rtn_quantize(w, g).values);
}

TEST(Gptq, IdentityGridLeavesWeightsUnchanged)
{
  std::mt19937_64 rng(49);
  const WeightMatrix w = random_matrix(rng, 6, 3);
  const Tensor3 x = mixed_input(rng, random_mix(rng, 6), nullptr, nullptr, 6, 3, 3);
  const std::vector<Tensor3> xs{x};
  MatrixXdR work = to_eigen(w);
  gptq_sweep(work, weighted_hessian(kPointwise, xs, nullptr, 0.01), [](std::size_t, std::size_t, double v) { return v; });
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_EQ(work(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)), static_cast<double>(w.at(r, c)));
}

TEST(Gptq, ReportsIndefiniteHessian)
{
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(3, 3);
  m(1, 1) = -1.0;
  const WeightMatrix w(3, 1, {0.1f, 0.2f, 0.3f});
  EXPECT_THROW(gptq_quantize(w, hessian_from(m), make_weight_grid(w, 4)), NumericalError);
}

TEST(Gptq, BeatsRoundToNearestOnCorrelatedInputs)
{
  std::mt19937_64 rng(50);
  int wins = 0;
  for (int t = 0; t < 100; ++t)
  {
    const WeightMatrix w = random_matrix(rng, 8, 4);
    const Tensor3 x = mixed_input(rng, random_mix(rng, 8), nullptr, nullptr, 8, 8, 8);
    const std::vector<Tensor3> xs{x};
    const QuantGrid g = make_weight_grid(w, 4);
    const auto gq = gptq_quantize(w, weighted_hessian(kPointwise, xs, nullptr, 0.01), g).dequantize();
    const auto rq = rtn_quantize(w, g).dequantize();
    wins += output_error(w, gq, xs) <= output_error(w, rq, xs);
  }
  EXPECT_GE(wins, 90);
}

TEST(Gptq, UvWeightingHelpsInsideMaskedRegion)
{
  std::mt19937_64 rng(51);
  int wins = 0;
  for (int t = 0; t < 100; ++t)
  {
    const std::size_t d = 8;
    RegionMask region(8, 8);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 2; x < 6; ++x)
        region.set(y, x, true);
    UVImportanceMap map(8, 8, 1.0f);
    for (std::size_t i = 0; i < 64; ++i)
      map.weights[i] = region.membership[i] ? 1.0f : 0.0f;

    const auto in_mix = random_mix(rng, d), out_mix = random_mix(rng, d);
    std::vector<Tensor3> calib, eval;
    for (int s = 0; s < 4; ++s)
      calib.push_back(mixed_input(rng, in_mix, &out_mix, &region, d, 8, 8));
    for (int s = 0; s < 4; ++s)
      eval.push_back(mixed_input(rng, in_mix, &out_mix, &region, d, 8, 8));

    const WeightMatrix w = random_matrix(rng, d, 4);
    const QuantGrid g = make_weight_grid(w, 4);
    const auto uq = gptq_quantize(w, weighted_hessian(kPointwise, calib, &map, 0.01), g).dequantize();
    const auto pq = gptq_quantize(w, weighted_hessian(kPointwise, calib, nullptr, 0.01), g).dequantize();
    wins += output_error(w, uq, eval, &map.weights) < output_error(w, pq, eval, &map.weights);
  }
  EXPECT_GE(wins, 80);
}

TEST(Gptq, Deterministic)
{
  std::mt19937_64 rng(52);
  const DecoderModel m = random_decoder(rng, {4, 6, 3});
  const std::vector<Tensor3> calib{random_tensor(rng, 4, 3, 3), random_tensor(rng, 4, 3, 3)};
  QuantizeOptions opt;
  const auto a = quantize_model(m, calib, opt), b = quantize_model(m, calib, opt);
  for (std::size_t i = 0; i < 2; ++i)
  {
    EXPECT_EQ(a.layers[i].weights.values, b.layers[i].weights.values);
    for (std::int32_t v : a.layers[i].weights.values)
    {
      EXPECT_GE(v, -8);
      EXPECT_LE(v, 7);
    }
  }
}

TEST(FakeQuant, ThirtyTwoBitGridsMatchFloat)
{
  std::mt19937_64 rng(53);
  const DecoderModel m = random_decoder(rng, {4, 6, 5, 3});
  std::vector<Tensor3> calib;
  for (int i = 0; i < 3; ++i)
    calib.push_back(random_tensor(rng, 4, 3, 3));
  QuantizeOptions opt;
  opt.weight_bits = 32;
  opt.act_bits = 32;
  opt.act_clip_percentile = std::nullopt;
  const auto q = quantize_model(m, calib, opt);
  for (const auto &x : calib)
    EXPECT_LE(max_abs_diff(fake_quant_forward(q, x), oracle::forward(m, x)), 1e-4);
}

TEST(FakeQuant, EightBitBeatsFourBit)
{
  std::mt19937_64 rng(54);
  const DecoderModel m = random_decoder(rng, {8, 8, 6, 3});
  std::vector<Tensor3> calib, eval;
  for (int i = 0; i < 6; ++i)
    calib.push_back(random_tensor(rng, 8, 4, 4));
  for (int i = 0; i < 3; ++i)
    eval.push_back(random_tensor(rng, 8, 4, 4));
  QuantizeOptions w8, w4;
  w8.weight_bits = w8.act_bits = 8;
  w4.weight_bits = w4.act_bits = 4;
  const auto q8 = quantize_model(m, calib, w8), q4 = quantize_model(m, calib, w4);
  double e8 = 0.0, e4 = 0.0;
  for (const auto &x : eval)
  {
    const Tensor3 ref = forward(m, x);
    e8 += mse(fake_quant_forward(q8, x), ref);
    e4 += mse(fake_quant_forward(q4, x), ref);
  }
  EXPECT_LT(e8, e4);
}

TEST(FakeQuant, ZeroInputGivesBias)
{
  std::mt19937_64 rng(55);
  const DecoderModel m = random_decoder(rng, {3, 4});
  const std::vector<Tensor3> calib{random_tensor(rng, 3, 3, 3)};
  const auto q = quantize_model(m, calib, QuantizeOptions{});
  const Tensor3 y = fake_quant_forward(q, Tensor3(3, 3, 3));
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < y.plane(); ++i)
      EXPECT_EQ(y.data[c * y.plane() + i], m.layers[0].bias[c]);
}

TEST(FakeQuant, RejectsUncalibratedLayer)
{
  std::mt19937_64 rng(56);
  const DecoderModel m = random_decoder(rng, {3, 4});
  const std::vector<Tensor3> calib{random_tensor(rng, 3, 3, 3)};
  auto q = quantize_model(m, calib, QuantizeOptions{});
  q.layers[0].activation_grid.reset();
  EXPECT_THROW(fake_quant_forward(q, calib[0]), InvalidArgument);
}
