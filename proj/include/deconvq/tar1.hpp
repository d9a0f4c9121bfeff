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

// TAR1 tensor container, little-endian:
//   "TAR1" | u32 rank | rank x u32 dims | u8 dtype | raw payload
// dtype: 0 = f32, 1 = i32, 2 = u8.

#include "deconvq/errors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace deconvq::tar1
{

enum class DType : std::uint8_t
{
  f32 = 0,
  i32 = 1,
  u8 = 2
};

struct Archive
{
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<std::int32_t>, std::vector<std::uint8_t>> payload;

  DType dtype() const { return static_cast<DType>(payload.index()); }

  std::size_t element_count() const
  {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }

  template <typename T> const std::vector<T> &as() const
  {
    if (auto *p = std::get_if<std::vector<T>>(&payload))
      return *p;
    throw IoError("TAR1: payload has unexpected dtype");
  }
};

namespace detail
{

template <typename T> void put_le(std::string &out, T v)
{
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(bytes.begin(), bytes.end());
  out.append(reinterpret_cast<const char *>(bytes.data()), bytes.size());
}

template <typename T> T get_le(const std::string &in, std::size_t &pos)
{
  if (pos + sizeof(T) > in.size())
    throw IoError("TAR1: truncated stream");
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  pos += sizeof(T);
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

} // namespace detail

inline std::string encode(const Archive &a)
{
  if (a.element_count() != std::visit([](const auto &v) { return v.size(); }, a.payload))
    throw IoError("TAR1: payload length does not match dims");
  std::string out = "TAR1";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.dims.size()));
  for (auto d : a.dims)
    detail::put_le<std::uint32_t>(out, d);
  out.push_back(static_cast<char>(a.dtype()));
  std::visit(
    [&](const auto &v) {
      for (auto x : v)
        detail::put_le(out, x);
    },
    a.payload);
  return out;
}

inline Archive decode(const std::string &bytes)
{
  if (bytes.size() < 9 || bytes.compare(0, 4, "TAR1") != 0)
    throw IoError("TAR1: bad magic");
  std::size_t pos = 4;
  Archive a;
  const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
  if (rank > 16)
    throw IoError("TAR1: implausible rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i)
    a.dims.push_back(detail::get_le<std::uint32_t>(bytes, pos));
  const auto tag = detail::get_le<std::uint8_t>(bytes, pos);
  const std::size_t n = a.element_count();
  auto read_all = [&](auto sample) {
    using T = decltype(sample);
    if (bytes.size() - pos != n * sizeof(T))
      throw IoError("TAR1: payload size does not match dims");
    std::vector<T> v(n);
    for (auto &x : v)
      x = detail::get_le<T>(bytes, pos);
    a.payload = std::move(v);
  };
  switch (tag)
  {
    case 0:
      read_all(float{});
      break;
    case 1:
      read_all(std::int32_t{});
      break;
    case 2:
      read_all(std::uint8_t{});
      break;
    default:
      throw IoError("TAR1: unknown dtype tag " + std::to_string(tag));
  }
  return a;
}

inline void write_file(const std::filesystem::path &path, const Archive &a)
{
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode(a);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f)
    throw IoError("write failed for '" + path.string() + "'");
}

inline Archive read_file(const std::filesystem::path &path)
{
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  try
  {
    return decode(ss.str());
  }
  catch (const IoError &e)
  {
    throw IoError(path.string() + ": " + e.what());
  }
}

template <typename T> Archive make(std::vector<std::uint32_t> dims, std::vector<T> values)
{
  Archive a;
  a.dims = std::move(dims);
  a.payload = std::move(values);
  if (a.element_count() != std::get<std::vector<T>>(a.payload).size())
    throw IoError("TAR1: payload length does not match dims");
  return a;
}

} // namespace deconvq::tar1
