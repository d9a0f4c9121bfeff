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

// Weight-stationary systolic array model with 4x4 input combining.
//
// A weight block occupies the R x C array: R cycles to preload, then N activation
// columns stream through with R + C - 1 cycles of skew and drain. Combining packs
// each checkerboard 4-row band into two rows whose PEs hold two weights and pick
// one per cycle through the lane map.

#include "deconvq/conv.hpp"
#include "deconvq/errors.hpp"
#include "deconvq/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace deconvq
{

enum class TileClass : std::uint8_t
{
  all_zero,
  checkerboard,
  dense
};

inline const char *to_string(TileClass c)
{
  switch (c)
  {
    case TileClass::all_zero:
      return "all_zero";
    case TileClass::checkerboard:
      return "checkerboard";
    default:
      return "dense";
  }
}

/// Two disjoint row pairs covering rows 0..3 of a tile.
using Pairing = std::array<std::array<std::uint8_t, 2>, 2>;

inline constexpr std::array<Pairing, 3> kPairings = {{
  {{{0, 1}, {2, 3}}},
  {{{0, 2}, {1, 3}}},
  {{{0, 3}, {1, 2}}},
}};

inline constexpr std::uint8_t kAllPairings = 0b111;

struct TileDescriptor
{
  std::size_t row_origin = 0;
  std::size_t col_origin = 0;
  TileClass cls = TileClass::all_zero;
  std::uint8_t valid_pairings = 0; // bit p set when kPairings[p] has disjoint support
  std::optional<std::uint8_t> pairing;
};

struct TileMap
{
  std::size_t rows = 0; // unpadded matrix dims
  std::size_t cols = 0;
  std::size_t bands = 0;
  std::size_t groups = 0;
  std::vector<TileDescriptor> tiles; // band-major

  const TileDescriptor &at(std::size_t band, std::size_t group) const { return tiles[band * groups + group]; }

  std::size_t count(TileClass c) const
  {
    return static_cast<std::size_t>(
      std::count_if(tiles.begin(), tiles.end(), [c](const TileDescriptor &t) { return t.cls == c; }));
  }
};

/// Zero-pads to multiples of 4 and labels every 4x4 tile. A pair of rows is usable
/// when no column has two nonzeros in it; a zero partner is simply an idle lane.
template <typename T> TileMap classify_tiles(const BasicIm2col<T> &m)
{
  TileMap map;
  map.rows = m.rows;
  map.cols = m.cols;
  map.bands = (m.rows + 3) / 4;
  map.groups = (m.cols + 3) / 4;
  map.tiles.resize(map.bands * map.groups);
  auto nz = [&](std::size_t r, std::size_t c) { return r < m.rows && c < m.cols && m.at(r, c) != T{}; };
  for (std::size_t b = 0; b < map.bands; ++b)
    for (std::size_t g = 0; g < map.groups; ++g)
    {
      TileDescriptor &t = map.tiles[b * map.groups + g];
      t.row_origin = b * 4;
      t.col_origin = g * 4;
      bool any = false;
      for (std::size_t i = 0; i < 4 && !any; ++i)
        for (std::size_t j = 0; j < 4 && !any; ++j)
          any = nz(t.row_origin + i, t.col_origin + j);
      if (!any)
      {
        t.cls = TileClass::all_zero;
        t.valid_pairings = kAllPairings;
        continue;
      }
      for (std::uint8_t p = 0; p < kPairings.size(); ++p)
      {
        bool ok = true;
        for (const auto &pair : kPairings[p])
          for (std::size_t j = 0; j < 4 && ok; ++j)
            ok = !(nz(t.row_origin + pair[0], t.col_origin + j) && nz(t.row_origin + pair[1], t.col_origin + j));
        if (ok)
          t.valid_pairings |= static_cast<std::uint8_t>(1u << p);
      }
      if (t.valid_pairings == 0)
        t.cls = TileClass::dense;
      else
      {
        t.cls = TileClass::checkerboard;
        t.pairing = static_cast<std::uint8_t>(std::countr_zero(t.valid_pairings));
      }
    }
  return map;
}

enum class Lane : std::uint8_t
{
  a = 0,
  b = 1,
  idle = 2
};

/// Original rows behind the two weight lanes of one packed row.
struct PackedRow
{
  std::size_t row_a = 0;
  std::size_t row_b = 0;
};

/// Columns sharing one retained-band set and one pairing per band.
template <typename T> struct CompactedSegment
{
  std::vector<std::size_t> columns; // original column indices, ascending
  std::vector<std::size_t> bands;   // retained bands, ascending
  std::vector<std::uint8_t> pairings;
  std::vector<PackedRow> rows;      // 2 per band
  std::vector<T> values;            // rows.size() x columns.size(), row-major
  std::vector<Lane> lanes;

  std::size_t packed_rows() const { return rows.size(); }
  T value(std::size_t p, std::size_t j) const { return values[p * columns.size() + j]; }
  Lane lane(std::size_t p, std::size_t j) const { return lanes[p * columns.size() + j]; }
};

template <typename T> struct BasicCompacted
{
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<CompactedSegment<T>> segments;

  std::size_t packed_rows() const
  {
    std::size_t r = 0;
    for (const auto &s : segments)
      r = std::max(r, s.packed_rows());
    return r;
  }

  /// Packed entries streamed through the array, summed over segments.
  std::size_t packed_entries() const
  {
    std::size_t n = 0;
    for (const auto &s : segments)
      n += s.packed_rows() * s.columns.size();
    return n;
  }
};

using CompactedActivation = BasicCompacted<float>;

namespace detail
{

struct SegmentPlan
{
  std::vector<std::uint8_t> member; // per band: retained in this segment
  std::vector<std::uint8_t> mask;   // per band: pairings valid for every group so far
  std::vector<std::size_t> groups;
};

inline bool subset_of(const std::vector<std::uint8_t> &a, const std::vector<std::uint8_t> &b)
{
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] && !b[i])
      return false;
  return true;
}

// Combined plan if one band set contains the other and every band keeps a pairing.
inline std::optional<SegmentPlan> try_merge(const SegmentPlan &x, const SegmentPlan &y)
{
  const bool x_in_y = subset_of(x.member, y.member);
  if (!x_in_y && !subset_of(y.member, x.member))
    return std::nullopt;
  SegmentPlan out;
  out.member = x_in_y ? y.member : x.member;
  out.mask.resize(x.mask.size());
  for (std::size_t b = 0; b < out.mask.size(); ++b)
  {
    out.mask[b] = x.mask[b] & y.mask[b];
    if (out.member[b] && out.mask[b] == 0)
      return std::nullopt;
  }
  out.groups = x.groups;
  out.groups.insert(out.groups.end(), y.groups.begin(), y.groups.end());
  std::sort(out.groups.begin(), out.groups.end());
  return out;
}

inline std::vector<SegmentPlan> plan_segments(const TileMap &tiles)
{
  std::vector<SegmentPlan> plans;
  for (std::size_t g = 0; g < tiles.groups; ++g)
  {
    SegmentPlan single;
    single.member.resize(tiles.bands);
    single.mask.resize(tiles.bands);
    for (std::size_t b = 0; b < tiles.bands; ++b)
    {
      const TileDescriptor &t = tiles.at(b, g);
      if (t.cls == TileClass::dense)
        throw CompactionInfeasible("dense tile at row " + std::to_string(t.row_origin) + ", col " +
                                   std::to_string(t.col_origin));
      single.member[b] = t.cls == TileClass::checkerboard;
      single.mask[b] = t.valid_pairings;
    }
    single.groups = {g};
    bool placed = false;
    for (auto &p : plans)
      if (auto merged = try_merge(p, single))
      {
        p = std::move(*merged);
        placed = true;
        break;
      }
    if (!placed)
      plans.push_back(std::move(single));
  }
  for (bool changed = true; changed;)
  {
    changed = false;
    for (std::size_t i = 0; i < plans.size() && !changed; ++i)
      for (std::size_t j = i + 1; j < plans.size() && !changed; ++j)
        if (auto merged = try_merge(plans[i], plans[j]))
        {
          plans[i] = std::move(*merged);
          plans.erase(plans.begin() + static_cast<std::ptrdiff_t>(j));
          changed = true;
        }
  }
  std::sort(plans.begin(), plans.end(),
            [](const SegmentPlan &a, const SegmentPlan &b) { return a.groups.front() < b.groups.front(); });
  return plans;
}

} // namespace detail

/// Drops all-zero tiles and stacks the retained bands of each column segment.
template <typename T> BasicCompacted<T> compact(const BasicIm2col<T> &m, const TileMap &tiles)
{
  detail::require_shape(tiles.rows == m.rows && tiles.cols == m.cols, "compact: tile map does not match matrix");
  BasicCompacted<T> out;
  out.rows = m.rows;
  out.cols = m.cols;
  auto get = [&](std::size_t r, std::size_t c) { return r < m.rows ? m.at(r, c) : T{}; };
  for (const auto &plan : detail::plan_segments(tiles))
  {
    CompactedSegment<T> seg;
    for (std::size_t g : plan.groups)
      for (std::size_t c = g * 4; c < std::min(m.cols, g * 4 + 4); ++c)
        seg.columns.push_back(c);
    for (std::size_t b = 0; b < tiles.bands; ++b)
      if (plan.member[b])
      {
        const auto p = static_cast<std::uint8_t>(std::countr_zero(plan.mask[b]));
        seg.bands.push_back(b);
        seg.pairings.push_back(p);
        for (const auto &pair : kPairings[p])
          seg.rows.push_back(PackedRow{b * 4 + pair[0], b * 4 + pair[1]});
      }
    const std::size_t n = seg.columns.size();
    seg.values.assign(seg.rows.size() * n, T{});
    seg.lanes.assign(seg.rows.size() * n, Lane::idle);
    for (std::size_t p = 0; p < seg.rows.size(); ++p)
      for (std::size_t j = 0; j < n; ++j)
      {
        const T va = get(seg.rows[p].row_a, seg.columns[j]);
        const T vb = get(seg.rows[p].row_b, seg.columns[j]);
        if (va != T{})
        {
          seg.values[p * n + j] = va;
          seg.lanes[p * n + j] = Lane::a;
        }
        else if (vb != T{})
        {
          seg.values[p * n + j] = vb;
          seg.lanes[p * n + j] = Lane::b;
        }
      }
    out.segments.push_back(std::move(seg));
  }
  return out;
}

template <typename T> BasicCompacted<T> compact(const BasicIm2col<T> &m) { return compact(m, classify_tiles(m)); }

template <typename T> BasicIm2col<T> expand(const BasicCompacted<T> &c)
{
  std::vector<T> data(c.rows * c.cols, T{});
  for (const auto &seg : c.segments)
    for (std::size_t p = 0; p < seg.rows.size(); ++p)
      for (std::size_t j = 0; j < seg.columns.size(); ++j)
      {
        const Lane l = seg.lane(p, j);
        if (l == Lane::idle)
          continue;
        const std::size_t r = l == Lane::a ? seg.rows[p].row_a : seg.rows[p].row_b;
        detail::require(r < c.rows, "expand: lane map points past the matrix");
        data[r * c.cols + seg.columns[j]] = seg.value(p, j);
      }
  return BasicIm2col<T>(c.rows, c.cols, std::move(data));
}

enum class Precision
{
  int8,
  int4
};

inline const char *to_string(Precision p) { return p == Precision::int8 ? "int8" : "int4"; }

inline Precision precision_from_string(const std::string &s)
{
  if (s == "int8")
    return Precision::int8;
  if (s == "int4")
    return Precision::int4;
  throw InvalidArgument("unknown precision '" + s + "' (expected int8 or int4)");
}

struct ArrayConfig
{
  std::size_t rows = 16;
  std::size_t cols = 16;
  Precision precision = Precision::int8;
  double int4_multiplier = 4.0;
  bool combining = false;

  void validate() const
  {
    detail::require(rows >= 1 && cols >= 1, "ArrayConfig: array dims must be >= 1");
    detail::require(int4_multiplier >= 1.0, "ArrayConfig: int4 multiplier must be >= 1");
  }

  double throughput() const { return precision == Precision::int4 ? int4_multiplier : 1.0; }
};

struct LayerSimReport
{
  std::string name;
  bool combining_used = false;
  std::size_t d = 0;     // im2col rows
  std::size_t d_eff = 0; // packed rows (largest segment) or d
  std::size_t n = 0;     // im2col columns
  std::size_t c_out = 0;
  std::size_t segments = 1;
  std::uint64_t base_cycles = 0; // at one MAC per PE per cycle
  double cycles = 0.0;           // after the precision multiplier
  std::uint64_t macs_issued = 0;
  std::uint64_t useful_macs = 0;
  std::uint64_t skipped_macs = 0;
  std::uint64_t geometric_macs = 0;
  double utilization = 0.0;
};

struct SimReport
{
  ArrayConfig config;
  double clock_hz = 1e9;
  std::vector<LayerSimReport> layers;
  double total_cycles = 0.0;
  std::uint64_t total_base_cycles = 0;
  std::uint64_t macs_issued = 0;
  std::uint64_t useful_macs = 0;
  std::uint64_t skipped_macs = 0;
  std::uint64_t geometric_macs = 0;
  double utilization = 0.0;
  double latency_s = 0.0;
};

inline std::uint64_t block_cycles(const ArrayConfig &cfg, std::size_t n)
{
  return cfg.rows + n + cfg.rows + cfg.cols - 1;
}

/// Cycles for a d_eff x N activation against d_eff x c_out weights.
inline std::uint64_t gemm_cycles(const ArrayConfig &cfg, std::size_t d_eff, std::size_t n, std::size_t c_out)
{
  if (d_eff == 0 || n == 0 || c_out == 0)
    return 0;
  const std::uint64_t blocks = ((d_eff + cfg.rows - 1) / cfg.rows) * ((c_out + cfg.cols - 1) / cfg.cols);
  return blocks * block_cycles(cfg, n);
}

namespace detail
{

inline void finish_layer(LayerSimReport &r, const ArrayConfig &cfg)
{
  r.geometric_macs = static_cast<std::uint64_t>(r.d) * r.n * r.c_out;
  r.skipped_macs = r.macs_issued < r.geometric_macs ? r.geometric_macs - r.macs_issued : 0;
  r.cycles = static_cast<double>(r.base_cycles) / cfg.throughput();
  // int4 raises both the cycle rate and the per-PE MAC rate, so capacity uses base cycles.
  r.utilization = r.base_cycles == 0 ? 0.0
                                     : static_cast<double>(r.useful_macs) /
                                         (static_cast<double>(r.base_cycles) * cfg.rows * cfg.cols);
}

template <typename T>
LayerSimReport baseline_stats(const BasicIm2col<T> &x, std::size_t c_out, const ArrayConfig &cfg)
{
  LayerSimReport r;
  r.d = r.d_eff = x.rows;
  r.n = x.cols;
  r.c_out = c_out;
  r.base_cycles = gemm_cycles(cfg, x.rows, x.cols, c_out);
  r.macs_issued = static_cast<std::uint64_t>(x.rows) * x.cols * c_out;
  std::uint64_t nnz = 0;
  for (const T &v : x.data)
    nnz += v != T{};
  r.useful_macs = nnz * c_out;
  finish_layer(r, cfg);
  return r;
}

template <typename T>
LayerSimReport compacted_stats(const BasicCompacted<T> &x, std::size_t c_out, const ArrayConfig &cfg)
{
  LayerSimReport r;
  r.combining_used = true;
  r.d = x.rows;
  r.d_eff = x.packed_rows();
  r.n = x.cols;
  r.c_out = c_out;
  r.segments = x.segments.size();
  std::uint64_t nnz = 0;
  for (const auto &seg : x.segments)
  {
    r.base_cycles += gemm_cycles(cfg, seg.packed_rows(), seg.columns.size(), c_out);
    r.macs_issued += static_cast<std::uint64_t>(seg.packed_rows()) * seg.columns.size() * c_out;
    for (Lane l : seg.lanes)
      nnz += l != Lane::idle;
  }
  r.useful_macs = nnz * c_out;
  finish_layer(r, cfg);
  return r;
}

} // namespace detail

/// Dense d x C_out weight operand in unfolded row order.
template <typename T> struct GemmWeights
{
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  T at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

inline GemmWeights<float> gemm_weights(const WeightMatrix &w) { return {w.rows, w.cols, w.data}; }

template <typename T>
using accumulator_t = std::conditional_t<std::is_integral_v<T>, std::int64_t, double>;

template <typename T> struct GemmResult
{
  LayerSimReport stats;
  std::vector<accumulator_t<T>> output; // c_out x N, row-major
};

template <typename T>
GemmResult<T> simulate_gemm(const GemmWeights<T> &w, const BasicIm2col<T> &x, const ArrayConfig &cfg)
{
  cfg.validate();
  detail::require(!cfg.combining, "simulate_gemm: combining requires a compacted activation");
  detail::require_shape(w.rows == x.rows, "simulate_gemm: weight rows do not match activation rows");
  GemmResult<T> res;
  res.stats = detail::baseline_stats(x, w.cols, cfg);
  res.output.assign(w.cols * x.cols, 0);
  for (std::size_t co = 0; co < w.cols; ++co)
    for (std::size_t r = 0; r < w.rows; ++r)
    {
      const accumulator_t<T> wv = w.at(r, co);
      for (std::size_t j = 0; j < x.cols; ++j)
        res.output[co * x.cols + j] += wv * static_cast<accumulator_t<T>>(x.at(r, j));
    }
  return res;
}

template <typename T>
GemmResult<T> simulate_gemm(const GemmWeights<T> &w, const BasicCompacted<T> &x, const ArrayConfig &cfg)
{
  cfg.validate();
  detail::require_shape(w.rows == x.rows, "simulate_gemm: weight rows do not match activation rows");
  GemmResult<T> res;
  res.stats = detail::compacted_stats(x, w.cols, cfg);
  res.output.assign(w.cols * x.cols, 0);
  for (const auto &seg : x.segments)
    for (std::size_t p = 0; p < seg.rows.size(); ++p)
      for (std::size_t j = 0; j < seg.columns.size(); ++j)
      {
        const Lane l = seg.lane(p, j);
        if (l == Lane::idle)
          continue;
        const std::size_t r = l == Lane::a ? seg.rows[p].row_a : seg.rows[p].row_b;
        if (r >= w.rows)
          throw InvalidArgument("simulate_gemm: lane map selects row " + std::to_string(r) +
                                " beyond the weight matrix");
        const auto a = static_cast<accumulator_t<T>>(seg.value(p, j));
        for (std::size_t co = 0; co < w.cols; ++co)
          res.output[co * x.cols + seg.columns[j]] += static_cast<accumulator_t<T>>(w.at(r, co)) * a;
      }
  return res;
}

/// Cycle and MAC accounting for one layer. With combining on, a dense tile or a
/// packing that would cost more cycles (or, at equal cycles, issue more MACs)
/// leaves the layer in baseline mode.
template <typename T>
LayerSimReport simulate_layer(const BasicIm2col<T> &x, std::size_t c_out, const ArrayConfig &cfg)
{
  cfg.validate();
  LayerSimReport base = detail::baseline_stats(x, c_out, cfg);
  if (!cfg.combining)
    return base;
  try
  {
    LayerSimReport comb = detail::compacted_stats(compact(x), c_out, cfg);
    const bool better = comb.base_cycles < base.base_cycles ||
                        (comb.base_cycles == base.base_cycles && comb.macs_issued <= base.macs_issued);
    return better ? comb : base;
  }
  catch (const CompactionInfeasible &)
  {
    return base;
  }
}

namespace detail
{

inline void finish_report(SimReport &rep)
{
  for (const auto &l : rep.layers)
  {
    rep.total_cycles += l.cycles;
    rep.total_base_cycles += l.base_cycles;
    rep.macs_issued += l.macs_issued;
    rep.useful_macs += l.useful_macs;
    rep.skipped_macs += l.skipped_macs;
    rep.geometric_macs += l.geometric_macs;
  }
  rep.utilization = rep.total_base_cycles == 0
                      ? 0.0
                      : static_cast<double>(rep.useful_macs) /
                          (static_cast<double>(rep.total_base_cycles) * rep.config.rows * rep.config.cols);
  rep.latency_s = rep.total_cycles / rep.clock_hz;
}

} // namespace detail

/// Structural simulation: every layer input is taken as all-nonzero, so the only
/// zeros are those introduced by zero insertion and padding.
inline SimReport simulate_decoder(const DecoderModel &model, std::size_t input_h, std::size_t input_w,
                                  const ArrayConfig &cfg, double clock_hz = 1e9)
{
  model.validate();
  cfg.validate();
  detail::require(clock_hz > 0.0, "simulate_decoder: clock must be positive");
  SimReport rep;
  rep.config = cfg;
  rep.clock_hz = clock_hz;
  std::size_t h = input_h, w = input_w;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    const Layer &layer = model.layers[i];
    const Tensor3 ones(layer.weights.in_channels, h, w, 1.0f);
    LayerSimReport r = simulate_layer(lower_input(layer.spec, ones), layer.weights.out_channels, cfg);
    r.name = "layer" + std::to_string(i);
    rep.layers.push_back(std::move(r));
    h = layer_output_size(layer.spec, h);
    w = layer_output_size(layer.spec, w);
  }
  detail::finish_report(rep);
  return rep;
}

/// Data-driven variant: zeros in the actual layer inputs also count.
inline SimReport simulate_decoder(const DecoderModel &model, const Tensor3 &input, const ArrayConfig &cfg,
                                  double clock_hz = 1e9)
{
  cfg.validate();
  detail::require(clock_hz > 0.0, "simulate_decoder: clock must be positive");
  const ForwardTrace trace = forward_trace(model, input);
  SimReport rep;
  rep.config = cfg;
  rep.clock_hz = clock_hz;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
  {
    const Layer &layer = model.layers[i];
    LayerSimReport r = simulate_layer(lower_input(layer.spec, trace.inputs[i]), layer.weights.out_channels, cfg);
    r.name = "layer" + std::to_string(i);
    rep.layers.push_back(std::move(r));
  }
  detail::finish_report(rep);
  return rep;
}

} // namespace deconvq
