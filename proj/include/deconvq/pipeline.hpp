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

// Discrete-event list scheduler for the sensor/encode/transmit/decode/render loop.
//
// Resources: camera (sensor), accelerator (encode + decode), a half-duplex link
// (outbound and inbound latent per frame) and the renderer. Each stage keeps a
// FIFO by frame; only the head of each FIFO competes for its resource.

#include "deconvq/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace deconvq
{

struct StageLatencies
{
  double sensor_ms = 1.0;
  double encode_ms = 3.0;
  double transmit_ms = 5.0;
  double decode_ms = 3.0;
  double render_ms = 9.5;

  void validate() const
  {
    for (double v : {sensor_ms, encode_ms, transmit_ms, decode_ms, render_ms})
      detail::require(std::isfinite(v) && v >= 0.0, "StageLatencies: latencies must be finite and >= 0");
  }

  StageLatencies scaled(double c) const
  {
    return {sensor_ms * c, encode_ms * c, transmit_ms * c, decode_ms * c, render_ms * c};
  }
};

enum class Stage : std::uint8_t
{
  sensor,
  encode,
  transmit_out,
  transmit_in,
  decode,
  render
};

inline constexpr std::size_t kStageCount = 6;

inline const char *to_string(Stage s)
{
  static constexpr std::array<const char *, kStageCount> names = {
    "sensor", "encode", "transmit_out", "transmit_in", "decode", "render"};
  return names[static_cast<std::size_t>(s)];
}

enum class Resource : std::uint8_t
{
  camera,
  accelerator,
  link,
  renderer
};

inline Resource resource_of(Stage s)
{
  switch (s)
  {
    case Stage::sensor:
      return Resource::camera;
    case Stage::encode:
    case Stage::decode:
      return Resource::accelerator;
    case Stage::transmit_out:
    case Stage::transmit_in:
      return Resource::link;
    default:
      return Resource::renderer;
  }
}

struct Interval
{
  double start = 0.0;
  double end = 0.0;
};

struct Schedule
{
  StageLatencies latencies;
  std::size_t frames = 0;
  std::vector<std::array<Interval, kStageCount>> jobs; // [frame][stage]

  const Interval &at(std::size_t frame, Stage s) const { return jobs[frame][static_cast<std::size_t>(s)]; }

  double frame_latency(std::size_t frame) const
  {
    return at(frame, Stage::render).end - at(frame, Stage::sensor).start;
  }
};

inline double stage_duration(const StageLatencies &l, Stage s)
{
  switch (s)
  {
    case Stage::sensor:
      return l.sensor_ms;
    case Stage::encode:
      return l.encode_ms;
    case Stage::transmit_out:
    case Stage::transmit_in:
      return l.transmit_ms;
    case Stage::decode:
      return l.decode_ms;
    default:
      return l.render_ms;
  }
}

namespace detail
{

struct Job
{
  Stage stage;
  std::size_t frame;
};

// Fixed service order per resource. The accelerator encodes one frame ahead
// (E0, E1, D0, E2, D1, ...) so a decode waiting on its inbound latent never
// stalls the encoder, and the link sends frame k's inbound latent before its
// outbound one.
inline std::array<std::vector<Job>, 4> service_order(std::size_t frames)
{
  std::array<std::vector<Job>, 4> q;
  auto &cam = q[static_cast<std::size_t>(Resource::camera)];
  auto &acc = q[static_cast<std::size_t>(Resource::accelerator)];
  auto &link = q[static_cast<std::size_t>(Resource::link)];
  auto &ren = q[static_cast<std::size_t>(Resource::renderer)];
  acc.push_back({Stage::encode, 0});
  for (std::size_t k = 0; k < frames; ++k)
  {
    cam.push_back({Stage::sensor, k});
    if (k + 1 < frames)
      acc.push_back({Stage::encode, k + 1});
    acc.push_back({Stage::decode, k});
    link.push_back({Stage::transmit_in, k});
    link.push_back({Stage::transmit_out, k});
    ren.push_back({Stage::render, k});
  }
  return q;
}

} // namespace detail

/// Event-driven schedule: each resource serves its queue in order, starting the
/// head job as soon as the resource is free and the job's inputs are complete.
inline Schedule schedule(const StageLatencies &lat, std::size_t frames)
{
  lat.validate();
  detail::require(frames >= 1, "schedule: frames must be >= 1");
  constexpr double pending = std::numeric_limits<double>::infinity();

  Schedule s;
  s.latencies = lat;
  s.frames = frames;
  s.jobs.assign(frames, {});
  std::array<std::vector<bool>, kStageCount> done_flag;
  for (auto &v : done_flag)
    v.assign(frames, false);
  const auto queues = detail::service_order(frames);
  std::array<std::size_t, 4> head{};
  std::array<double, 4> free_at{};

  auto end_of = [&](std::size_t k, Stage st) {
    return done_flag[static_cast<std::size_t>(st)][k] ? s.at(k, st).end : pending;
  };
  auto ready_time = [&](const detail::Job &j) -> double {
    switch (j.stage)
    {
      case Stage::sensor:
        return 0.0;
      case Stage::encode:
        return end_of(j.frame, Stage::sensor);
      case Stage::transmit_out:
      case Stage::transmit_in:
        return end_of(j.frame, Stage::encode);
      case Stage::decode:
        return std::max(end_of(j.frame, Stage::encode), end_of(j.frame, Stage::transmit_in));
      default:
        return end_of(j.frame, Stage::decode);
    }
  };

  double t = 0.0;
  std::size_t remaining = frames * kStageCount;
  while (remaining > 0)
  {
    // Zero-length jobs can unlock further starts at the same instant.
    for (bool started = true; started;)
    {
      started = false;
      for (std::size_t r = 0; r < queues.size(); ++r)
      {
        if (head[r] >= queues[r].size() || free_at[r] > t || ready_time(queues[r][head[r]]) > t)
          continue;
        const detail::Job j = queues[r][head[r]++];
        const double d = stage_duration(lat, j.stage);
        s.jobs[j.frame][static_cast<std::size_t>(j.stage)] = {t, t + d};
        done_flag[static_cast<std::size_t>(j.stage)][j.frame] = true;
        free_at[r] = t + d;
        --remaining;
        started = true;
      }
    }
    if (remaining == 0)
      break;
    double next = pending;
    for (std::size_t r = 0; r < queues.size(); ++r)
    {
      if (free_at[r] > t)
        next = std::min(next, free_at[r]);
      if (head[r] < queues[r].size())
      {
        const double rt = ready_time(queues[r][head[r]]);
        if (rt > t)
          next = std::min(next, rt);
      }
    }
    if (!(next < pending))
      throw Error("schedule: no progress possible");
    t = next;
  }
  return s;
}

/// Median render-to-render interval over the second half of the horizon.
inline double steady_state_interval(const Schedule &s)
{
  detail::require(s.frames >= 8, "steady_state_fps: horizon must be >= 8 frames");
  std::vector<double> gaps;
  for (std::size_t k = s.frames / 2; k < s.frames; ++k)
    gaps.push_back(s.at(k, Stage::render).end - s.at(k - 1, Stage::render).end);
  std::sort(gaps.begin(), gaps.end());
  const std::size_t n = gaps.size();
  return n % 2 == 1 ? gaps[n / 2] : 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]);
}

inline double steady_state_fps(const Schedule &s)
{
  const double interval = steady_state_interval(s);
  if (!(interval > 0.0))
    throw InvalidArgument("steady_state_fps: zero frame interval (all latencies zero)");
  return 1000.0 / interval;
}

/// Closed-form throughput bound of the resource model.
inline double bottleneck_interval(const StageLatencies &l)
{
  return std::max({l.sensor_ms, l.encode_ms + l.decode_ms, 2.0 * l.transmit_ms, l.render_ms});
}

} // namespace deconvq
