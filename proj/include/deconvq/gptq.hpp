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
#include "deconvq/errors.hpp"
#include "deconvq/quant_grid.hpp"
#include "deconvq/uv_map.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace deconvq
{

using MatrixXdR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct WeightedHessian
{
  Eigen::MatrixXd matrix; // damped, symmetric
  double lambda = 0.0;
  std::size_t sample_count = 0;

  std::size_t dim() const { return static_cast<std::size_t>(matrix.rows()); }
};

namespace detail
{

// Adds scale * X X^T into the lower triangle of h. Columns are grouped by output
// position modulo the stride and rows that are zero across a group are skipped;
// for zero-inserted inputs this removes most of the work without changing the sum.
inline void accumulate_xxt(Eigen::MatrixXd &h, const Im2colMatrix &x, std::size_t group_count,
                           const std::vector<std::size_t> &group_of, double scale)
{
  std::vector<std::vector<std::size_t>> cols(group_count);
  for (std::size_t j = 0; j < x.cols; ++j)
    cols[group_of[j]].push_back(j);
  Eigen::MatrixXd sub, part;
  for (const auto &gc : cols)
  {
    if (gc.empty())
      continue;
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < x.rows; ++r)
      for (std::size_t j : gc)
        if (x.at(r, j) != 0.0f)
        {
          rows.push_back(r);
          break;
        }
    if (rows.empty())
      continue;
    const auto nr = static_cast<Eigen::Index>(rows.size());
    sub.resize(nr, static_cast<Eigen::Index>(gc.size()));
    for (Eigen::Index i = 0; i < nr; ++i)
      for (std::size_t k = 0; k < gc.size(); ++k)
        sub(i, static_cast<Eigen::Index>(k)) = x.at(rows[static_cast<std::size_t>(i)], gc[k]);
    part.setZero(nr, nr);
    part.selfadjointView<Eigen::Lower>().rankUpdate(sub, scale);
    for (Eigen::Index j = 0; j < nr; ++j)
      for (Eigen::Index i = j; i < nr; ++i)
        h(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]),
          static_cast<Eigen::Index>(rows[static_cast<std::size_t>(j)])) += part(i, j);
  }
}

} // namespace detail

/// H = (2/S) sum_s X_s X_s^T + lambda I, where X_s is the lowered layer input after
/// elementwise weighting by `map` (downsampled to the input size when needed).
/// lambda = lambda_frac * mean(diag); an all-zero accumulation damps with lambda_frac.
inline WeightedHessian weighted_hessian(const LayerSpec &spec, std::span<const Tensor3> inputs,
                                        const UVImportanceMap *map, double lambda_frac = 0.01)
{
  detail::require(!inputs.empty(), "weighted_hessian: no calibration inputs");
  detail::require(lambda_frac > 0.0 && std::isfinite(lambda_frac),
                  "weighted_hessian: lambda_frac must be positive (undamped H may be singular)");
  const double scale = 2.0 / static_cast<double>(inputs.size());
  std::optional<UVImportanceMap> resized;
  Eigen::MatrixXd h;
  std::size_t group_count = 1;
  std::vector<std::size_t> group_of;
  for (const Tensor3 &x : inputs)
  {
    Tensor3 weighted;
    const Tensor3 *src = &x;
    if (map)
    {
      if (!resized || resized->height != x.height || resized->width != x.width)
        resized = downsample_uv(*map, x.height, x.width);
      weighted = apply_uv_weighting(x, *resized);
      src = &weighted;
    }
    const Im2colMatrix cols = lower_input(spec, *src);
    if (h.size() == 0)
    {
      h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cols.rows), static_cast<Eigen::Index>(cols.rows));
      const std::size_t ow = layer_output_size(spec, x.width);
      const auto s = static_cast<std::size_t>(spec.kind == LayerKind::conv_transpose ? spec.stride : 1);
      group_count = s * s;
      group_of.resize(cols.cols);
      for (std::size_t j = 0; j < cols.cols; ++j)
        group_of[j] = (j / ow % s) * s + (j % ow % s);
    }
    detail::require_shape(static_cast<Eigen::Index>(cols.rows) == h.rows() && cols.cols == group_of.size(),
                          "weighted_hessian: calibration inputs disagree in shape");
    detail::accumulate_xxt(h, cols, group_count, group_of, scale);
  }
  h = h.selfadjointView<Eigen::Lower>();

  WeightedHessian out;
  const double mean_diag = h.diagonal().mean();
  out.lambda = lambda_frac * (mean_diag > 0.0 ? mean_diag : 1.0);
  h.diagonal().array() += out.lambda;
  out.matrix = std::move(h);
  out.sample_count = inputs.size();
  return out;
}

enum class GptqUpdateRule
{
  inverse_cholesky, // error feedback through the upper Cholesky factor of H^-1
  literal_hessian   // w_j -= e * H[r, j] / H[r, r]
};

/// Upper-triangular U with U^T U = H^-1, obtained without forming H^-1.
inline Eigen::MatrixXd inverse_cholesky_upper(const Eigen::MatrixXd &h)
{
  const Eigen::MatrixXd rev = h.reverse();
  Eigen::LLT<Eigen::MatrixXd> llt(rev);
  if (llt.info() != Eigen::Success)
    throw NumericalError("Hessian is not positive definite; increase lambda_frac");
  const Eigen::Index d = h.rows();
  Eigen::MatrixXd linv = Eigen::MatrixXd::Identity(d, d);
  llt.matrixL().solveInPlace(linv);
  Eigen::MatrixXd u = linv.reverse();
  if (!u.allFinite())
    throw NumericalError("inverse Cholesky factor is not finite");
  return u;
}

/// Sequential row-wise quantization with error feedback. `quant(r, c, v)` returns the
/// dequantized grid value chosen for entry (r, c); `w` holds the result on return.
template <typename Quantize>
void gptq_sweep(MatrixXdR &w, const WeightedHessian &hess, Quantize &&quant,
                GptqUpdateRule rule = GptqUpdateRule::inverse_cholesky)
{
  const Eigen::Index d = w.rows();
  detail::require_shape(static_cast<std::size_t>(d) == hess.dim(),
                        "gptq: Hessian dim does not match unfolded weight rows");
  Eigen::MatrixXd factor;
  if (rule == GptqUpdateRule::inverse_cholesky)
    factor = inverse_cholesky_upper(hess.matrix);
  else
  {
    factor = hess.matrix;
    if ((factor.diagonal().array() <= 0.0).any())
      throw NumericalError("Hessian has a non-positive diagonal entry");
  }
  Eigen::RowVectorXd err(w.cols());
  for (Eigen::Index r = 0; r < d; ++r)
  {
    const double pivot = factor(r, r);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
    {
      const double v = w(r, c);
      const double q = quant(static_cast<std::size_t>(r), static_cast<std::size_t>(c), v);
      err(c) = (v - q) / pivot;
      w(r, c) = q;
    }
    const Eigen::Index rest = d - r - 1;
    if (rest > 0)
      w.bottomRows(rest).noalias() -= factor.row(r).tail(rest).transpose() * err;
  }
  if (!w.allFinite())
    throw NumericalError("gptq: non-finite weights after error feedback");
}

/// Integer weights on a per-output-channel grid, rows in unfolded (C_in*K*K) order.
struct QuantizedWeights
{
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> values;
  QuantGrid grid;

  std::int32_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  WeightMatrix dequantize() const
  {
    WeightMatrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        m.at(r, c) = static_cast<float>(grid.dequantize(at(r, c), c));
    return m;
  }
};

inline MatrixXdR to_eigen(const WeightMatrix &m)
{
  MatrixXdR out(static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols));
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m.at(r, c);
  return out;
}

inline QuantizedWeights rtn_quantize(const WeightMatrix &w, const QuantGrid &grid)
{
  QuantizedWeights q{w.rows, w.cols, std::vector<std::int32_t>(w.data.size()), grid};
  for (std::size_t r = 0; r < w.rows; ++r)
    for (std::size_t c = 0; c < w.cols; ++c)
      q.values[r * w.cols + c] = static_cast<std::int32_t>(grid.quantize(w.at(r, c), c));
  return q;
}

inline QuantizedWeights gptq_quantize(const WeightMatrix &w, const WeightedHessian &hess,
                                      const QuantGrid &grid,
                                      GptqUpdateRule rule = GptqUpdateRule::inverse_cholesky)
{
  QuantizedWeights q{w.rows, w.cols, std::vector<std::int32_t>(w.data.size()), grid};
  MatrixXdR work = to_eigen(w);
  gptq_sweep(
    work, hess,
    [&](std::size_t r, std::size_t c, double v) {
      const auto qi = grid.quantize(v, c);
      q.values[r * w.cols + c] = static_cast<std::int32_t>(qi);
      return grid.dequantize(qi, c);
    },
    rule);
  return q;
}

} // namespace deconvq
