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

// Model aggregators: weighted FedAvg, pairwise-masked secure aggregation,
// staleness-weighted asynchronous merging, two-level (edge) aggregation and
// Metropolis gossip averaging.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flsim/common.hpp"
#include "flsim/model.hpp"

namespace flsim {

struct WeightedUpdate {
  ClientId client{};
  ParameterVector params;
  std::uint64_t n = 1;
};

namespace detail {

struct WeightedRef {
  std::uint64_t key;
  const ParameterVector* params;
  std::uint64_t n;
};

/// sum_i (n_i / N) p_i, accumulated in ascending key order. A single input
/// comes back bit-identical since its weight is exactly 1.
inline ParameterVector weighted_mean(std::vector<WeightedRef> refs, const char* who) {
  if (refs.empty()) throw ValidationError(std::string(who) + ": no updates to aggregate");
  std::sort(refs.begin(), refs.end(), [](const WeightedRef& a, const WeightedRef& b) { return a.key < b.key; });
  const std::size_t d = refs.front().params->size();
  double total = 0.0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (i > 0 && refs[i].key == refs[i - 1].key)
      throw ValidationError(std::string(who) + ": duplicate contributor " + std::to_string(refs[i].key));
    if (refs[i].params->size() != d) throw ShapeError(std::string(who) + ": dimension mismatch");
    if (refs[i].n == 0) throw ValidationError(std::string(who) + ": zero sample count");
    total += static_cast<double>(refs[i].n);
  }
  std::vector<double> acc(d, 0.0);
  for (const auto& r : refs) {
    const double w = static_cast<double>(r.n) / total;
    const auto p = r.params->values();
    for (std::size_t j = 0; j < d; ++j) acc[j] += w * p[j];
  }
  return ParameterVector(std::move(acc));
}

}  // namespace detail

inline ParameterVector fedavg(std::span<const WeightedUpdate> updates) {
  std::vector<detail::WeightedRef> refs;
  refs.reserve(updates.size());
  for (const auto& u : updates) refs.push_back({to_u32(u.client), &u.params, u.n});
  return detail::weighted_mean(std::move(refs), "model aggregator");
}

// ---------------------------------------------------------------------------
// Secure aggregation
//
// Each contributor encodes n_i * p_i as a signed fixed-point integer
// (32 fractional bits) in the ring Z/2^64 and adds pairwise pads. The lower
// id of a pair adds the pad, the higher id subtracts it, so the pads cancel
// exactly in the ring sum; only the quantization of the encoding remains,
// bounded by 2^-33 per coordinate after division by the total sample count.
// ---------------------------------------------------------------------------

inline constexpr int kMaskFractionBits = 32;
inline constexpr double kMaskScale = 4294967296.0;  // 2^32
inline constexpr double kMaskRange = 1073741824.0;  // 2^30, |n_i * p_i| limit

struct MaskPad {
  ClientId lo{};
  ClientId hi{};
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> pad;
};

inline std::uint64_t pair_seed(std::uint64_t round_seed, ClientId a, ClientId b) {
  const auto lo = std::min(to_u32(a), to_u32(b));
  const auto hi = std::max(to_u32(a), to_u32(b));
  return mix_seed(round_seed, 0x70616972ULL, lo, hi);
}

inline MaskPad make_pad(ClientId a, ClientId b, std::uint64_t round_seed, std::size_t d) {
  if (a == b) throw ValidationError("secure aggregator: pad needs two distinct clients");
  MaskPad p;
  p.lo = ClientId{std::min(to_u32(a), to_u32(b))};
  p.hi = ClientId{std::max(to_u32(a), to_u32(b))};
  p.seed = pair_seed(round_seed, a, b);
  Rng rng(p.seed);
  p.pad.resize(d);
  for (auto& w : p.pad) w = rng.next_u64();
  return p;
}

struct MaskedUpdate {
  ClientId client{};
  std::vector<std::uint64_t> words;
  std::uint64_t n = 1;
};

inline std::uint64_t encode_fixed(double x) {
  if (!(std::abs(x) < kMaskRange)) throw ValidationError("secure aggregator: weighted value outside fixed-point range");
  return static_cast<std::uint64_t>(static_cast<std::int64_t>(std::llround(x * kMaskScale)));
}

inline double decode_fixed(std::uint64_t w) { return static_cast<double>(static_cast<std::int64_t>(w)) / kMaskScale; }

/// Client side: mask n * p against every other member of the cohort.
inline MaskedUpdate mask_update(const WeightedUpdate& u, std::span<const ClientId> cohort, std::uint64_t round_seed) {
  const std::size_t d = u.params.size();
  MaskedUpdate m;
  m.client = u.client;
  m.n = u.n;
  m.words.resize(d);
  const auto p = u.params.values();
  const double n = static_cast<double>(u.n);
  for (std::size_t j = 0; j < d; ++j) m.words[j] = encode_fixed(n * p[j]);
  for (const ClientId other : cohort) {
    if (other == u.client) continue;
    const MaskPad pad = make_pad(u.client, other, round_seed, d);
    const bool adds = to_u32(u.client) < to_u32(other);
    for (std::size_t j = 0; j < d; ++j) m.words[j] = adds ? m.words[j] + pad.pad[j] : m.words[j] - pad.pad[j];
  }
  return m;
}

/// Server side: ring-sum the masked submissions and divide by the total
/// sample count. Every cohort member must be present, otherwise the pads do
/// not cancel and the round has to be re-run.
inline ParameterVector unmask_sum(std::span<const MaskedUpdate> masked, std::span<const ClientId> cohort) {
  std::set<std::uint32_t> expected, seen;
  for (const ClientId c : cohort) expected.insert(to_u32(c));
  if (expected.size() < 2) throw ValidationError("secure aggregator: needs at least 2 contributors");
  for (const auto& m : masked) {
    if (!expected.count(to_u32(m.client))) throw ValidationError("secure aggregator: submission from outside the cohort");
    if (!seen.insert(to_u32(m.client)).second) throw ValidationError("secure aggregator: duplicate submission");
  }
  if (seen != expected) {
    std::string missing;
    for (const auto c : expected) {
      if (!seen.count(c)) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
    }
    throw SecureAbortError("secure aggregator: contributors dropped after masking (" + missing +
                           "); round must be re-run");
  }
  std::vector<const MaskedUpdate*> order;
  for (const auto& m : masked) order.push_back(&m);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return to_u32(a->client) < to_u32(b->client); });
  const std::size_t d = order.front()->words.size();
  std::vector<std::uint64_t> sum(d, 0);
  double total = 0.0;
  for (const auto* m : order) {
    if (m->words.size() != d) throw ShapeError("secure aggregator: dimension mismatch");
    total += static_cast<double>(m->n);
    for (std::size_t j = 0; j < d; ++j) sum[j] += m->words[j];
  }
  std::vector<double> out(d);
  for (std::size_t j = 0; j < d; ++j) out[j] = decode_fixed(sum[j]) / total;
  return ParameterVector(std::move(out));
}

inline ParameterVector secure_round(std::span<const WeightedUpdate> updates, std::uint64_t round_seed) {
  if (updates.size() < 2) throw ValidationError("secure aggregator: needs at least 2 contributors");
  std::vector<ClientId> cohort;
  for (const auto& u : updates) cohort.push_back(u.client);
  std::vector<MaskedUpdate> masked;
  for (const auto& u : updates) masked.push_back(mask_update(u, cohort, round_seed));
  return unmask_sum(masked, cohort);
}

// ---------------------------------------------------------------------------
// Asynchronous aggregation
// ---------------------------------------------------------------------------

inline void validate_async(double alpha0, double a) {
  if (!(alpha0 > 0.0 && alpha0 <= 1.0)) throw ConfigError("asynchronous aggregator: alpha0 must be in (0, 1]");
  if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("asynchronous aggregator: staleness exponent must be >= 0");
}

inline double staleness_weight(double alpha0, double a, std::uint64_t staleness) {
  validate_async(alpha0, a);
  return alpha0 * std::pow(1.0 + static_cast<double>(staleness), -a);
}

/// global + alpha (update - global); alpha = 1 returns `update` exactly.
inline ParameterVector blend(const ParameterVector& global, const ParameterVector& update, double alpha) {
  if (global.size() != update.size()) throw ShapeError("asynchronous aggregator: dimension mismatch");
  if (alpha == 1.0) return update;
  std::vector<double> out(global.size());
  const auto g = global.values();
  const auto u = update.values();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = g[j] + alpha * (u[j] - g[j]);
  return ParameterVector(std::move(out));
}

/// (1 - alpha) * global + alpha * update with alpha = alpha0 (1 + s)^-a,
/// evaluated as global + alpha (update - global) so that update == global
/// is an exact fixed point.
inline ParameterVector async_merge(const ParameterVector& global, const ParameterVector& update, std::uint64_t /*n*/,
                                   std::uint64_t current_round, std::uint64_t base_round, double alpha0, double a) {
  validate_async(alpha0, a);
  if (base_round > current_round) throw ValidationError("asynchronous aggregator: base round is in the future");
  if (global.size() != update.size()) throw ShapeError("asynchronous aggregator: dimension mismatch");
  return blend(global, update, staleness_weight(alpha0, a, current_round - base_round));
}

// ---------------------------------------------------------------------------
// Hierarchical aggregation
// ---------------------------------------------------------------------------

struct EdgeGroup {
  std::uint32_t edge_id = 0;
  std::vector<ClientId> members;
};

struct EdgeModel {
  std::uint32_t edge_id = 0;
  ParameterVector params;
  std::uint64_t weight = 0;  // sum of member sample counts
};

/// Partial aggregate at one edge node.
inline EdgeModel edge_aggregate(std::uint32_t edge_id, std::span<const WeightedUpdate> member_updates) {
  EdgeModel e;
  e.edge_id = edge_id;
  e.params = fedavg(member_updates);
  for (const auto& u : member_updates) e.weight += u.n;
  return e;
}

inline ParameterVector combine_edges(std::span<const EdgeModel> edges) {
  std::vector<detail::WeightedRef> refs;
  for (const auto& e : edges) refs.push_back({e.edge_id, &e.params, e.weight});
  return detail::weighted_mean(std::move(refs), "hierarchical aggregator");
}

inline ParameterVector hierarchical_aggregate(std::span<const EdgeGroup> groups, std::span<const WeightedUpdate> updates) {
  std::map<std::uint32_t, const WeightedUpdate*> by_client;
  for (const auto& u : updates) {
    if (!by_client.emplace(to_u32(u.client), &u).second)
      throw PartitionError("hierarchical aggregator: duplicate update for client " + to_string(u.client));
  }
  std::set<std::uint32_t> assigned;
  std::vector<EdgeModel> edges;
  for (const auto& g : groups) {
    std::vector<WeightedUpdate> members;
    for (const ClientId c : g.members) {
      if (!assigned.insert(to_u32(c)).second)
        throw PartitionError("hierarchical aggregator: client " + to_string(c) + " is in more than one group");
      const auto it = by_client.find(to_u32(c));
      if (it == by_client.end())
        throw PartitionError("hierarchical aggregator: group member " + to_string(c) + " has no update");
      members.push_back(*it->second);
    }
    if (!members.empty()) edges.push_back(edge_aggregate(g.edge_id, members));
  }
  if (assigned.size() != by_client.size())
    throw PartitionError("hierarchical aggregator: groups do not cover every contributor");
  return combine_edges(edges);
}

// ---------------------------------------------------------------------------
// Decentralised (gossip) aggregation
// ---------------------------------------------------------------------------

/// Undirected connected graph with Metropolis mixing weights
/// w_ij = 1 / (1 + max(deg_i, deg_j)), w_ii = 1 - sum_j w_ij.
class GossipGraph {
 public:
  GossipGraph(std::vector<ClientId> nodes, const std::vector<std::pair<ClientId, ClientId>>& edges)
      : nodes_(std::move(nodes)) {
    const std::size_t n = nodes_.size();
    if (n == 0) throw ValidationError("gossip graph: no nodes");
    std::map<std::uint32_t, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) {
      if (!index.emplace(to_u32(nodes_[i]), i).second) throw ValidationError("gossip graph: duplicate node");
    }
    adj_.assign(n, {});
    for (const auto& [a, b] : edges) {
      const auto ia = index.find(to_u32(a));
      const auto ib = index.find(to_u32(b));
      if (ia == index.end() || ib == index.end()) throw ValidationError("gossip graph: edge references unknown node");
      if (ia->second == ib->second) continue;
      adj_[ia->second].insert(ib->second);
      adj_[ib->second].insert(ia->second);
    }
    if (!connected()) throw ValidationError("gossip graph: graph is disconnected");
    weights_.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double off = 0.0;
      for (const std::size_t j : adj_[i]) {
        const double w = 1.0 / (1.0 + static_cast<double>(std::max(adj_[i].size(), adj_[j].size())));
        weights_[i * n + j] = w;
        off += w;
      }
      weights_[i * n + i] = 1.0 - off;
    }
  }

  static GossipGraph ring(std::vector<ClientId> nodes) {
    std::vector<std::pair<ClientId, ClientId>> edges;
    for (std::size_t i = 0; i + 1 < nodes.size(); ++i) edges.emplace_back(nodes[i], nodes[i + 1]);
    if (nodes.size() > 2) edges.emplace_back(nodes.back(), nodes.front());
    return GossipGraph(std::move(nodes), edges);
  }

  static GossipGraph complete(std::vector<ClientId> nodes) {
    std::vector<std::pair<ClientId, ClientId>> edges;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      for (std::size_t j = i + 1; j < nodes.size(); ++j) edges.emplace_back(nodes[i], nodes[j]);
    return GossipGraph(std::move(nodes), edges);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<ClientId>& nodes() const noexcept { return nodes_; }
  const std::set<std::size_t>& neighbors(std::size_t i) const { return adj_[i]; }
  double weight(std::size_t i, std::size_t j) const { return weights_[i * nodes_.size() + j]; }

 private:
  bool connected() const {
    std::vector<bool> seen(nodes_.size(), false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    std::size_t count = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      for (const std::size_t j : adj_[i]) {
        if (!seen[j]) {
          seen[j] = true;
          ++count;
          stack.push_back(j);
        }
      }
    }
    return count == nodes_.size();
  }

  std::vector<ClientId> nodes_;
  std::vector<std::set<std::size_t>> adj_;
  std::vector<double> weights_;
};

using NodeStates = std::map<ClientId, ParameterVector>;

/// One synchronous mixing step x_i' = sum_j w_ij x_j. `delivered(j, i)`
/// reports whether node j's state reached node i; a missing neighbour state
/// is replaced by the receiver's own.
template <typename Delivered>
NodeStates gossip_round(const GossipGraph& graph, const NodeStates& states, Delivered&& delivered) {
  const auto& nodes = graph.nodes();
  std::vector<const ParameterVector*> x(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto it = states.find(nodes[i]);
    if (it == states.end()) throw ValidationError("gossip: missing state for node " + to_string(nodes[i]));
    x[i] = &it->second;
  }
  const std::size_t d = x.front()->size();
  NodeStates out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (x[i]->size() != d) throw ShapeError("gossip: dimension mismatch");
    std::vector<double> acc(d, 0.0);
    // Ascending node index, self included, for a fixed summation order.
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      const double w = graph.weight(i, j);
      if (w == 0.0) continue;
      const ParameterVector* src = (j == i || delivered(j, i)) ? x[j] : x[i];
      const auto v = src->values();
      for (std::size_t c = 0; c < d; ++c) acc[c] += w * v[c];
    }
    out.emplace(nodes[i], ParameterVector(std::move(acc)));
  }
  return out;
}

inline NodeStates gossip_round(const GossipGraph& graph, const NodeStates& states) {
  return gossip_round(graph, states, [](std::size_t, std::size_t) { return true; });
}

/// Max over coordinates of (max - min) across nodes.
inline double spread(const NodeStates& states) {
  if (states.empty()) return 0.0;
  const std::size_t d = states.begin()->second.size();
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    double lo = states.begin()->second[c], hi = lo;
    for (const auto& [id, p] : states) {
      lo = std::min(lo, p[c]);
      hi = std::max(hi, p[c]);
    }
    s = std::max(s, hi - lo);
  }
  return s;
}

inline std::vector<double> node_mean(const NodeStates& states) {
  const std::size_t d = states.begin()->second.size();
  std::vector<double> m(d, 0.0);
  for (const auto& [id, p] : states)
    for (std::size_t c = 0; c < d; ++c) m[c] += p[c];
  for (double& v : m) v /= static_cast<double>(states.size());
  return m;
}

}  // namespace flsim
