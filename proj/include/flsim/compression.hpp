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

// Top-k sparsification with uniform midrise quantization of the kept values.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "flsim/common.hpp"
#include "flsim/model.hpp"

namespace flsim {

struct CompressionSpec {
  double top_k = 1.0;  // fraction of coordinates kept, in (0, 1]
  int bits = 16;       // 4, 8 or 16; 64 with top_k = 1 means "send dense"

  bool is_passthrough() const noexcept { return bits == 64 && top_k == 1.0; }

  void validate() const {
    if (!(top_k > 0.0 && top_k <= 1.0)) throw ConfigError("message compressor: top_k must be in (0, 1]");
    if (is_passthrough()) return;
    if (bits != 4 && bits != 8 && bits != 16)
      throw ConfigError("message compressor: bits must be one of 4, 8, 16 (or 64 with top_k = 1)");
  }
};

struct CompressedUpdate {
  std::uint32_t d = 0;
  std::vector<std::uint32_t> indices;  // sorted, unique
  std::vector<std::uint32_t> codes;    // one per index, in [0, 2^bits - 1]
  double scale = 0.0;                  // max |kept value|
  int bits = 8;

  friend bool operator==(const CompressedUpdate&, const CompressedUpdate&) = default;
};

inline std::uint32_t quantizer_steps(int bits) { return (std::uint32_t{1} << bits) - 1u; }

/// Reconstruction level for `code`; levels span [-scale, scale] in
/// 2^bits - 1 equal steps, so zero falls between two levels.
inline double dequantize(std::uint32_t code, double scale, int bits) {
  const double steps = quantizer_steps(bits);
  return -scale + static_cast<double>(code) * (2.0 * scale / steps);
}

inline std::size_t kept_count(double top_k, std::size_t d) {
  const double raw = std::ceil(top_k * static_cast<double>(d) - 1e-9);
  return std::min(d, static_cast<std::size_t>(std::max(0.0, raw)));
}

inline CompressedUpdate compress(std::span<const double> update, const CompressionSpec& spec) {
  spec.validate();
  if (spec.is_passthrough()) throw ConfigError("message compressor: passthrough spec has no compressed form");
  for (const double v : update) {
    if (!std::isfinite(v)) throw ValidationError("message compressor: non-finite update");
  }
  const std::size_t d = update.size();
  const std::size_t k = kept_count(spec.top_k, d);

  std::vector<std::uint32_t> order(d);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return std::abs(update[a]) > std::abs(update[b]); });
  order.resize(k);
  std::sort(order.begin(), order.end());

  CompressedUpdate cu;
  cu.d = static_cast<std::uint32_t>(d);
  cu.bits = spec.bits;
  double m = 0.0;
  for (const std::uint32_t i : order) m = std::max(m, std::abs(update[i]));
  cu.scale = m;
  cu.indices = std::move(order);
  cu.codes.reserve(k);

  const std::uint32_t steps = quantizer_steps(spec.bits);
  for (const std::uint32_t i : cu.indices) {
    if (m == 0.0) {
      cu.codes.push_back(0);
      continue;
    }
    const double pos = (update[i] + m) / (2.0 * m) * steps;
    auto q = static_cast<std::int64_t>(std::llround(pos));
    q = std::clamp<std::int64_t>(q, 0, steps);
    // Settle on whichever neighbouring level reconstructs closest.
    std::int64_t best = q;
    double best_err = std::abs(dequantize(static_cast<std::uint32_t>(q), m, spec.bits) - update[i]);
    for (const std::int64_t cand : {q - 1, q + 1}) {
      if (cand < 0 || cand > steps) continue;
      const double err = std::abs(dequantize(static_cast<std::uint32_t>(cand), m, spec.bits) - update[i]);
      if (err < best_err) {
        best = cand;
        best_err = err;
      }
    }
    cu.codes.push_back(static_cast<std::uint32_t>(best));
  }
  return cu;
}

inline void validate(const CompressedUpdate& cu) {
  if (cu.bits != 4 && cu.bits != 8 && cu.bits != 16) throw CorruptionError("compressed update: bad bit width");
  if (cu.indices.size() != cu.codes.size()) throw CorruptionError("compressed update: index/code count mismatch");
  if (cu.indices.size() > cu.d) throw CorruptionError("compressed update: more entries than dimensions");
  if (!std::isfinite(cu.scale) || cu.scale < 0.0) throw CorruptionError("compressed update: bad scale");
  const std::uint32_t steps = quantizer_steps(cu.bits);
  for (std::size_t i = 0; i < cu.indices.size(); ++i) {
    if (cu.indices[i] >= cu.d)
      throw CorruptionError("compressed update: index " + std::to_string(cu.indices[i]) + " >= d");
    if (i > 0 && cu.indices[i] <= cu.indices[i - 1]) throw CorruptionError("compressed update: indices not sorted");
    if (cu.codes[i] > steps) throw CorruptionError("compressed update: code out of range");
  }
}

inline ParameterVector decompress(const CompressedUpdate& cu) {
  validate(cu);
  std::vector<double> out(cu.d, 0.0);
  for (std::size_t i = 0; i < cu.indices.size(); ++i) out[cu.indices[i]] = dequantize(cu.codes[i], cu.scale, cu.bits);
  return ParameterVector(std::move(out));
}

}  // namespace flsim
