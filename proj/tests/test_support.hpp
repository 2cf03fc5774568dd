/*
 * Copyright 2026 The flsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flsim/flsim.hpp"

namespace flsim::testing {

inline std::vector<double> random_vector(Rng& rng, std::size_t d, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Gaussian blobs around +-sep along random directions, one per class.
inline Dataset blob_dataset(std::uint64_t seed, std::size_t n, int dim, int classes, double sep = 3.0) {
  Rng rng(seed);
  std::vector<std::vector<double>> centres(static_cast<std::size_t>(classes));
  for (auto& c : centres) c = random_vector(rng, static_cast<std::size_t>(dim), -sep, sep);
  Dataset d(dim, classes);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(classes));
    std::vector<double> x(static_cast<std::size_t>(dim));
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = centres[static_cast<std::size_t>(y)][j] + 0.5 * rng.normal();
    d.add(x, y);
  }
  return d;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const ParameterVector& a, const ParameterVector& b) {
  return max_abs_diff(a.values(), b.values());
}

/// Per-coordinate |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / denom);
  }
  return m;
}

inline std::string source_dir() { return FLSIM_SOURCE_DIR; }

inline json minimal_config() {
  return json::parse(R"({"n_clients": 4, "job": {"rounds": 5}})");
}

}  // namespace flsim::testing
