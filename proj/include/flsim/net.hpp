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

// Deterministic discrete-event network: per-message latency, dropout and
// bandwidth, and a (time, seq)-ordered event queue. Simulated time only.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "flsim/common.hpp"

namespace flsim {

inline constexpr std::uint32_t kServerNode = 0xFFFFFFFFu;
inline constexpr std::uint32_t kEdgeNodeBase = 0xFFFF0000u;

inline std::uint32_t edge_node(std::uint32_t edge_id) { return kEdgeNodeBase + edge_id; }

inline std::string node_name(std::uint32_t node) {
  if (node == kServerNode) return "server";
  if (node >= kEdgeNodeBase) return "edge" + std::to_string(node - kEdgeNodeBase);
  return "client" + std::to_string(node);
}

struct NetConfig {
  double latency_ms_min = 0.0;
  double latency_ms_max = 0.0;
  double dropout_prob = 0.0;
  double bandwidth_bytes_per_s = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;

  void validate() const {
    if (!(latency_ms_min >= 0.0) || !(latency_ms_max >= latency_ms_min))
      throw ConfigError("net: need 0 <= latency_ms_min <= latency_ms_max");
    if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("net: dropout_prob must be in [0, 1)");
    if (!(bandwidth_bytes_per_s > 0.0)) throw ConfigError("net: bandwidth must be positive");
  }
};

struct Envelope {
  std::uint32_t sender = 0;
  std::uint32_t receiver = 0;
  std::uint64_t byte_size = 1;
  double sent_at = 0.0;
  std::uint64_t seq = 0;
  std::optional<double> delivered_at;  // empty: dropped

  bool dropped() const noexcept { return !delivered_at.has_value(); }
};

/// Resolves the outcome of one message. The draws come from a stream keyed
/// by (cfg.seed, sender, receiver, seq), so the outcome does not depend on
/// the order in which messages are resolved.
inline Envelope send(Envelope env, const NetConfig& cfg, double clock) {
  if (env.byte_size < 1) throw ValidationError("net: byte_size must be >= 1");
  env.sent_at = clock;
  Rng rng(mix_seed(cfg.seed, env.sender, env.receiver, env.seq));
  const double drop_draw = rng.uniform();
  const double latency_draw = rng.uniform();
  if (drop_draw < cfg.dropout_prob) {
    env.delivered_at.reset();
    return env;
  }
  const double transfer =
      std::isinf(cfg.bandwidth_bytes_per_s) ? 0.0 : static_cast<double>(env.byte_size) / cfg.bandwidth_bytes_per_s;
  const double latency_ms = cfg.latency_ms_min + (cfg.latency_ms_max - cfg.latency_ms_min) * latency_draw;
  env.delivered_at = clock + transfer + latency_ms / 1000.0;
  return env;
}

/// Stateful wrapper that numbers messages and keeps byte totals.
class Network {
 public:
  explicit Network(NetConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  Envelope send(std::uint32_t sender, std::uint32_t receiver, std::uint64_t byte_size, double clock) {
    Envelope env;
    env.sender = sender;
    env.receiver = receiver;
    env.byte_size = byte_size;
    env.seq = next_seq_++;
    env = flsim::send(env, cfg_, clock);
    bytes_sent_ += byte_size;
    return env;
  }

  const NetConfig& config() const noexcept { return cfg_; }
  std::uint64_t messages_sent() const noexcept { return next_seq_; }
  std::uint64_t bytes_sent() const noexcept { return bytes_sent_; }

 private:
  NetConfig cfg_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t bytes_sent_ = 0;
};

enum class EventKind { Deliver, ClientDone, Timer };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::Deliver: return "deliver";
    case EventKind::ClientDone: return "client_done";
    case EventKind::Timer: return "timer";
  }
  return "?";
}

template <typename Payload>
struct SimEvent {
  double time_s = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::Timer;
  Payload payload{};
};

/// Strict priority order on (time_s, seq). Scheduling an event earlier than
/// the last one handed out is a causality violation.
template <typename Payload>
class EventQueue {
 public:
  std::uint64_t schedule(double time_s, EventKind kind, Payload payload) {
    if (!(time_s >= now_) || !std::isfinite(time_s))
      throw ValidationError("event queue: event at t=" + std::to_string(time_s) + " precedes current time " +
                            std::to_string(now_));
    const std::uint64_t seq = next_seq_++;
    heap_.push(SimEvent<Payload>{time_s, seq, kind, std::move(payload)});
    return seq;
  }

  std::optional<SimEvent<Payload>> next() {
    if (heap_.empty()) return std::nullopt;
    SimEvent<Payload> ev = heap_.top();
    heap_.pop();
    now_ = ev.time_s;
    return ev;
  }

  bool empty() const noexcept { return heap_.empty(); }
  std::size_t size() const noexcept { return heap_.size(); }
  double now() const noexcept { return now_; }

  /// Moves the clock forward without an event (e.g. a between-rounds gap).
  void advance_to(double t) {
    if (t > now_) now_ = t;
  }

 private:
  struct Later {
    bool operator()(const SimEvent<Payload>& a, const SimEvent<Payload>& b) const noexcept {
      if (a.time_s != b.time_s) return a.time_s > b.time_s;
      return a.seq > b.seq;
    }
  };

  std::priority_queue<SimEvent<Payload>, std::vector<SimEvent<Payload>>, Later> heap_;
  std::uint64_t next_seq_ = 0;
  double now_ = 0.0;
};

}  // namespace flsim
