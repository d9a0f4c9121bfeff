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

// Glue between library operands and the event-driven array oracle.

#include "deconvq/accelsim.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace deconvq::testing
{

using IntIm2col = BasicIm2col<std::int64_t>;

inline IntIm2col to_int(const Im2colMatrix &m)
{
  std::vector<std::int64_t> v(m.data.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<std::int64_t>(m.data[i]);
  return IntIm2col(m.rows, m.cols, std::move(v));
}

/// Tensor with integer values in [lo, hi]; roughly `zero_frac` of entries forced to 0.
inline Tensor3 random_int_tensor(std::mt19937_64 &rng, std::size_t c, std::size_t h, std::size_t w, int lo = -8,
                                 int hi = 7, double zero_frac = 0.0)
{
  std::uniform_int_distribution<int> d(lo, hi);
  std::bernoulli_distribution z(zero_frac);
  Tensor3 t(c, h, w);
  for (float &v : t.data)
    v = z(rng) ? 0.0f : static_cast<float>(d(rng));
  return t;
}

inline GemmWeights<std::int64_t> random_int_weights(std::mt19937_64 &rng, std::size_t d, std::size_t c_out)
{
  std::uniform_int_distribution<int> u(-8, 7);
  GemmWeights<std::int64_t> w{d, c_out, std::vector<std::int64_t>(d * c_out)};
  for (auto &v : w.data)
    v = u(rng);
  return w;
}

/// Uncompacted operand: every entry of every row streams through lane a.
inline oracle::StreamOperand dense_stream(const IntIm2col &x)
{
  oracle::StreamOperand s;
  s.rows = x.rows;
  s.n = x.cols;
  for (std::size_t r = 0; r < x.rows; ++r)
    s.source.push_back({r, r});
  s.act = x.data;
  s.lane.assign(x.data.size(), 0);
  for (std::size_t j = 0; j < x.cols; ++j)
    s.column.push_back(j);
  return s;
}

/// One operand per segment of a compacted activation.
inline std::vector<oracle::StreamOperand> packed_streams(const BasicCompacted<std::int64_t> &x)
{
  std::vector<oracle::StreamOperand> out;
  for (const auto &seg : x.segments)
  {
    oracle::StreamOperand s;
    s.rows = seg.packed_rows();
    s.n = seg.columns.size();
    for (const auto &pr : seg.rows)
      s.source.push_back({pr.row_a, pr.row_b});
    s.act = seg.values;
    for (Lane l : seg.lanes)
      s.lane.push_back(static_cast<std::uint8_t>(l));
    s.column = seg.columns;
    out.push_back(std::move(s));
  }
  return out;
}

/// Event-driven result for a (possibly multi-segment) operand set.
inline oracle::SystolicResult run_streams(const GemmWeights<std::int64_t> &w,
                                          const std::vector<oracle::StreamOperand> &streams, std::size_t total_cols,
                                          const ArrayConfig &cfg)
{
  oracle::SystolicResult acc;
  acc.out.assign(w.cols * total_cols, 0);
  for (const auto &s : streams)
  {
    const auto r = oracle::run_gemm(w.data, w.rows, w.cols, s, cfg.rows, cfg.cols, total_cols);
    acc.cycles += r.cycles;
    acc.macs += r.macs;
    for (std::size_t i = 0; i < acc.out.size(); ++i)
      acc.out[i] += r.out[i];
  }
  return acc;
}

} // namespace deconvq::testing
