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

#include <stdexcept>
#include <string>

namespace deconvq
{

class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

// Bad argument, bad geometry or bad configuration value.
class InvalidArgument : public Error
{
public:
  using Error::Error;
};

class ShapeError : public Error
{
public:
  using Error::Error;
};

// Factorization failures and other numerical breakdowns.
class NumericalError : public Error
{
public:
  using Error::Error;
};

class IoError : public Error
{
public:
  using Error::Error;
};

// Raised by compact() when a tile has no disjoint-support pairing.
class CompactionInfeasible : public Error
{
public:
  using Error::Error;
};

namespace detail
{

inline void require(bool cond, const std::string &msg)
{
  if (!cond)
    throw InvalidArgument(msg);
}

inline void require_shape(bool cond, const std::string &msg)
{
  if (!cond)
    throw ShapeError(msg);
}

} // namespace detail

} // namespace deconvq
