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

// Canonical little-endian wire encoding. Every message starts with a 16-byte
// header: kind u32, round u32, sender u32, count u32.
//
//   dense params      count = d,   payload d x f64
//   compressed update count = |kept|, payload |kept| x (index u32 + code of
//                     ceil(bits/8) bytes), then scale f64
//   masked update     count = d,   payload d x u64 (ring elements)
//   edge model        count = d,   payload d x f64, then weight f64
//
// Upload envelopes add an eval report between header and payload.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "flsim/common.hpp"
#include "flsim/compression.hpp"
#include "flsim/model.hpp"

namespace flsim {

enum class MessageKind : std::uint32_t {
  broadcast = 1,
  dense_update = 2,
  compressed_update = 3,
  masked_update = 4,
  edge_model = 5,
  gossip_state = 6,
};

inline constexpr std::size_t kHeaderBytes = 16;

struct WireHeader {
  MessageKind kind = MessageKind::broadcast;
  std::uint32_t round = 0;
  std::uint32_t sender = 0;
  std::uint32_t count = 0;
};

inline int code_bytes(int bits) { return (bits + 7) / 8; }

// Sizes. These are the exact lengths of the encoders below.
inline std::size_t dense_message_bytes(std::size_t d) { return kHeaderBytes + 8 * d; }
inline std::size_t compressed_message_bytes(std::size_t kept, int bits) {
  return kHeaderBytes + kept * (4 + static_cast<std::size_t>(code_bytes(bits))) + 8;
}
inline std::size_t masked_message_bytes(std::size_t d) { return kHeaderBytes + 8 * d; }
inline std::size_t edge_message_bytes(std::size_t d) { return kHeaderBytes + 8 * d + 8; }
inline std::size_t eval_report_bytes(std::size_t num_classes) { return 8 + 8 + 4 + 4 + 4 * num_classes; }

inline void write_header(ByteWriter& w, const WireHeader& h) {
  w.u32(static_cast<std::uint32_t>(h.kind));
  w.u32(h.round);
  w.u32(h.sender);
  w.u32(h.count);
}

inline WireHeader read_header(ByteReader& r) {
  WireHeader h;
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 6) throw CorruptionError("wire: unknown message kind " + std::to_string(kind));
  h.kind = static_cast<MessageKind>(kind);
  h.round = r.u32();
  h.sender = r.u32();
  h.count = r.u32();
  return h;
}

inline Bytes encode_dense(MessageKind kind, std::uint32_t round, std::uint32_t sender, std::span<const double> v) {
  ByteWriter w;
  write_header(w, {kind, round, sender, static_cast<std::uint32_t>(v.size())});
  for (const double x : v) w.f64(x);
  return std::move(w).take();
}

inline Bytes encode_compressed(std::uint32_t round, std::uint32_t sender, const CompressedUpdate& cu) {
  ByteWriter w;
  write_header(w, {MessageKind::compressed_update, round, sender, static_cast<std::uint32_t>(cu.indices.size())});
  const int width = code_bytes(cu.bits);
  for (std::size_t i = 0; i < cu.indices.size(); ++i) {
    w.u32(cu.indices[i]);
    w.uint(cu.codes[i], width);
  }
  w.f64(cu.scale);
  return std::move(w).take();
}

inline Bytes encode_masked(std::uint32_t round, std::uint32_t sender, std::span<const std::uint64_t> words) {
  ByteWriter w;
  write_header(w, {MessageKind::masked_update, round, sender, static_cast<std::uint32_t>(words.size())});
  for (const std::uint64_t x : words) w.u64(x);
  return std::move(w).take();
}

inline Bytes encode_edge(std::uint32_t round, std::uint32_t sender, std::span<const double> v, double weight) {
  ByteWriter w;
  write_header(w, {MessageKind::edge_model, round, sender, static_cast<std::uint32_t>(v.size())});
  for (const double x : v) w.f64(x);
  w.f64(weight);
  return std::move(w).take();
}

inline void write_eval_report(ByteWriter& w, const EvalReport& r) {
  w.f64(r.loss);
  w.f64(r.accuracy);
  w.u32(static_cast<std::uint32_t>(r.n_samples));
  w.u32(static_cast<std::uint32_t>(r.per_class_counts.size()));
  for (const int c : r.per_class_counts) w.u32(static_cast<std::uint32_t>(c));
}

/// Decoded payload message. Exactly one of the value vectors is populated.
struct DecodedPayload {
  WireHeader header;
  std::vector<double> dense;
  CompressedUpdate compressed;
  std::vector<std::uint64_t> masked;
  double edge_weight = 0.0;
};

/// Decodes a header+payload message. `d` and `bits` describe compressed
/// payloads, whose header count is the number of kept entries.
inline DecodedPayload decode_payload(std::span<const std::uint8_t> bytes, std::uint32_t d = 0, int bits = 8) {
  ByteReader r(bytes);
  DecodedPayload out;
  out.header = read_header(r);
  const std::uint32_t n = out.header.count;
  switch (out.header.kind) {
    case MessageKind::broadcast:
    case MessageKind::dense_update:
    case MessageKind::gossip_state:
    case MessageKind::edge_model:
      out.dense.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) out.dense.push_back(r.f64());
      if (out.header.kind == MessageKind::edge_model) out.edge_weight = r.f64();
      break;
    case MessageKind::compressed_update: {
      out.compressed.d = d;
      out.compressed.bits = bits;
      const int width = code_bytes(bits);
      for (std::uint32_t i = 0; i < n; ++i) {
        out.compressed.indices.push_back(r.u32());
        out.compressed.codes.push_back(static_cast<std::uint32_t>(r.uint(width)));
      }
      out.compressed.scale = r.f64();
      validate(out.compressed);
      break;
    }
    case MessageKind::masked_update:
      out.masked.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) out.masked.push_back(r.u64());
      break;
  }
  if (r.remaining() != 0) throw CorruptionError("wire: trailing bytes after payload");
  return out;
}

/// Wire length of a dense parameter message.
inline std::size_t byte_size_of(const ParameterVector& p) { return dense_message_bytes(p.size()); }
inline std::size_t byte_size_of(const CompressedUpdate& cu) { return compressed_message_bytes(cu.indices.size(), cu.bits); }

}  // namespace flsim
