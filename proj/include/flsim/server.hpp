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

// Central-server control plane: job creation, client registry, per-round
// client selection and client clustering.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flsim/client.hpp"
#include "flsim/common.hpp"
#include "flsim/model.hpp"

namespace flsim {

enum class AggregationMode { fedavg, secure, async, hierarchical, decentralised };

inline const char* to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::fedavg: return "fedavg";
    case AggregationMode::secure: return "secure";
    case AggregationMode::async: return "async";
    case AggregationMode::hierarchical: return "hierarchical";
    case AggregationMode::decentralised: return "decentralised";
  }
  return "?";
}

enum class Component {
  registry,
  cluster,
  selector,
  compressor,
  multitask,
  co_versioning,
  incentives,
  deployment_selector,
  monitor,
  heterogeneous_handler,
  secure,
};

inline const std::map<std::string, Component>& component_names() {
  static const std::map<std::string, Component> names{
      {"registry", Component::registry},
      {"cluster", Component::cluster},
      {"selector", Component::selector},
      {"compressor", Component::compressor},
      {"multitask", Component::multitask},
      {"co_versioning", Component::co_versioning},
      {"incentives", Component::incentives},
      {"deployment_selector", Component::deployment_selector},
      {"monitor", Component::monitor},
      {"heterogeneous_handler", Component::heterogeneous_handler},
      {"secure", Component::secure},
  };
  return names;
}

enum class SelectionStrategy { uniform_random, top_resource, top_accuracy };

struct SelectionCriteria {
  double min_resource = 0.0;
  int min_samples = 0;
  SelectionStrategy strategy = SelectionStrategy::uniform_random;
};

struct JobConfig {
  ArchDescriptor arch;
  Hyperparameters hp;
  int rounds = 10;
  double fraction_per_round = 1.0;
  SelectionCriteria selection;
  AggregationMode aggregation_mode = AggregationMode::fedavg;
  std::set<Component> optional_components;
  InitMode init_mode = InitMode::zeros;
  std::uint64_t seed = 0;

  bool has(Component c) const { return optional_components.count(c) > 0; }
  bool secure() const { return aggregation_mode == AggregationMode::secure || has(Component::secure); }

  /// Every inconsistency between mode and flags, empty when valid.
  std::vector<std::string> conflicts() const {
    std::vector<std::string> out;
    try {
      arch.validate();
    } catch (const Error& e) {
      out.emplace_back(e.what());
    }
    try {
      hp.validate();
    } catch (const Error& e) {
      out.emplace_back(e.what());
    }
    if (rounds < 1) out.emplace_back("job creator: rounds must be positive");
    if (!(fraction_per_round > 0.0 && fraction_per_round <= 1.0))
      out.emplace_back("client selector: fraction_per_round must be in (0, 1]");
    const bool sec = secure();
    if (sec && aggregation_mode == AggregationMode::decentralised)
      out.emplace_back("secure aggregator cannot be combined with the decentralised aggregator");
    if (sec && aggregation_mode == AggregationMode::async)
      out.emplace_back("secure aggregator cannot be combined with the asynchronous aggregator");
    if (sec && aggregation_mode == AggregationMode::hierarchical)
      out.emplace_back("secure aggregator cannot be combined with the hierarchical aggregator");
    if (sec && has(Component::compressor))
      out.emplace_back("secure aggregator cannot be combined with the message compressor");
    if (has(Component::multitask) && arch.kind != ModelKind::mlp)
      out.emplace_back("multi-task model trainer requires an mlp arch");
    if (has(Component::multitask) && aggregation_mode == AggregationMode::decentralised)
      out.emplace_back("multi-task model trainer cannot be combined with the decentralised aggregator");
    if (has(Component::compressor) && aggregation_mode == AggregationMode::decentralised)
      out.emplace_back("message compressor cannot be combined with the decentralised aggregator");
    if (has(Component::deployment_selector) && !has(Component::cluster))
      out.emplace_back("deployment selector requires the client cluster component");
    if (has(Component::selector) && !has(Component::registry))
      out.emplace_back("client selector requires the client registry");
    if (!has(Component::selector) &&
        (selection.min_resource > 0.0 || selection.min_samples > 0 ||
         selection.strategy != SelectionStrategy::uniform_random))
      out.emplace_back("selection criteria are set but the client selector component is off");
    return out;
  }
};

struct Job {
  std::string job_id;
  ModelPackage package;
};

/// Initial global model "g0". The package carries the hyperparameters too.
inline Job create_job(const JobConfig& cfg) {
  const auto issues = cfg.conflicts();
  if (!issues.empty()) {
    std::string msg = "job creator: inconsistent configuration:";
    for (const auto& s : issues) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  std::uint64_t h = mix_seed(cfg.seed, static_cast<std::uint64_t>(cfg.arch.kind),
                             static_cast<std::uint64_t>(cfg.arch.input_dim),
                             static_cast<std::uint64_t>(cfg.arch.hidden_dim),
                             static_cast<std::uint64_t>(cfg.arch.num_classes),
                             static_cast<std::uint64_t>(cfg.aggregation_mode));
  Job job;
  job.job_id = "job-" + hex64(h);
  job.package = ModelPackage{"g0", init_params(cfg.arch, cfg.init_mode, cfg.seed), cfg.hp, cfg.arch};
  return job;
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

enum class ClientStatus { active, dropped, flagged };

inline const char* to_string(ClientStatus s) {
  switch (s) {
    case ClientStatus::active: return "active";
    case ClientStatus::dropped: return "dropped";
    case ClientStatus::flagged: return "flagged";
  }
  return "?";
}

struct ClientRecord {
  ClientId client_id{};
  double resource_score = 1.0;
  int rounds_participated = 0;
  std::optional<EvalReport> last_local_eval;
  double registered_at = 0.0;
  ClientStatus status = ClientStatus::active;
  int num_samples = 0;
};

class ClientRegistry {
 public:
  /// Fresh ids and previously dropped ids may register; re-registration keeps
  /// the participation count.
  const ClientRecord& register_client(ClientId id, double resource_score, double t, int num_samples = 0) {
    if (!(resource_score >= 0.0 && resource_score <= 1.0))
      throw ValidationError("client registry: resource_score must be in [0, 1]");
    auto it = records_.find(to_u32(id));
    if (it != records_.end()) {
      if (it->second.status == ClientStatus::active)
        throw ConflictError("client registry: client " + to_string(id) + " is already active");
      if (it->second.status == ClientStatus::flagged)
        throw ConflictError("client registry: client " + to_string(id) + " is flagged");
      it->second.status = ClientStatus::active;
      it->second.resource_score = resource_score;
      it->second.registered_at = t;
      it->second.num_samples = num_samples;
      return it->second;
    }
    ClientRecord rec;
    rec.client_id = id;
    rec.resource_score = resource_score;
    rec.registered_at = t;
    rec.num_samples = num_samples;
    return records_.emplace(to_u32(id), rec).first->second;
  }

  void mark_dropped(ClientId id) {
    auto& r = at(id);
    if (r.status == ClientStatus::active) r.status = ClientStatus::dropped;
  }

  /// Sticky: a flagged client never returns to active.
  void flag(ClientId id) { at(id).status = ClientStatus::flagged; }

  void record_participation(ClientId id, const EvalReport& report) {
    auto& r = at(id);
    ++r.rounds_participated;
    r.last_local_eval = report;
  }

  const ClientRecord* find(ClientId id) const {
    const auto it = records_.find(to_u32(id));
    return it == records_.end() ? nullptr : &it->second;
  }

  bool contains(ClientId id) const { return find(id) != nullptr; }

  std::vector<ClientId> active_ids() const {
    std::vector<ClientId> out;
    for (const auto& [k, r] : records_) {
      if (r.status == ClientStatus::active) out.push_back(r.client_id);
    }
    return out;
  }

  std::vector<ClientId> dropped_ids() const {
    std::vector<ClientId> out;
    for (const auto& [k, r] : records_) {
      if (r.status == ClientStatus::dropped) out.push_back(r.client_id);
    }
    return out;
  }

  const std::map<std::uint32_t, ClientRecord>& records() const noexcept { return records_; }

 private:
  ClientRecord& at(ClientId id) {
    auto it = records_.find(to_u32(id));
    if (it == records_.end()) throw ValidationError("client registry: unknown client " + to_string(id));
    return it->second;
  }

  std::map<std::uint32_t, ClientRecord> records_;
};

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

struct RoundPlan {
  std::uint32_t round_index = 0;
  std::string base_global_version;
  std::vector<ClientId> selected;  // ascending id
};

inline std::size_t selection_count(double fraction, std::size_t eligible) {
  const double raw = std::ceil(fraction * static_cast<double>(eligible) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1.0, raw)), 1, eligible);
}

/// Seeded uniform sample of `count` ids without replacement, ascending.
inline std::vector<ClientId> sample_uniform(std::vector<ClientId> pool, std::size_t count, std::uint64_t seed,
                                            std::uint32_t round) {
  std::sort(pool.begin(), pool.end());
  Rng rng(mix_seed(seed, 0x73656c65ULL, round));
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline RoundPlan select_clients(const ClientRegistry& registry, const SelectionCriteria& criteria, double fraction,
                                std::uint32_t round, std::uint64_t seed) {
  std::vector<const ClientRecord*> eligible;
  for (const auto& [k, r] : registry.records()) {
    if (r.status != ClientStatus::active) continue;
    if (r.resource_score < criteria.min_resource) continue;
    if (r.num_samples < criteria.min_samples) continue;
    eligible.push_back(&r);
  }
  if (eligible.empty())
    throw StarvationError("client selector: no eligible clients in round " + std::to_string(round));
  const std::size_t count = selection_count(fraction, eligible.size());

  RoundPlan plan;
  plan.round_index = round;
  if (criteria.strategy == SelectionStrategy::uniform_random) {
    std::vector<ClientId> ids;
    for (const auto* r : eligible) ids.push_back(r->client_id);
    plan.selected = sample_uniform(std::move(ids), count, seed, round);
    return plan;
  }
  auto key = [&](const ClientRecord* r) {
    if (criteria.strategy == SelectionStrategy::top_resource) return r->resource_score;
    return r->last_local_eval ? r->last_local_eval->accuracy : -1.0;
  };
  std::stable_sort(eligible.begin(), eligible.end(), [&](const ClientRecord* a, const ClientRecord* b) {
    const double ka = key(a), kb = key(b);
    if (ka != kb) return ka > kb;
    return a->client_id < b->client_id;
  });
  for (std::size_t i = 0; i < count; ++i) plan.selected.push_back(eligible[i]->client_id);
  std::sort(plan.selected.begin(), plan.selected.end());
  return plan;
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

struct ClusterAssignment {
  int k = 1;
  std::map<ClientId, int> assignment;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
};

/// 1 - cos(a, b); a zero vector is treated as orthogonal to everything.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace detail {

inline void normalize_in_place(std::vector<double>& v) {
  double n = 0.0;
  for (const double x : v) n += x * x;
  if (n == 0.0) return;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
}

inline int nearest_centroid(std::span<const double> x, const std::vector<std::vector<double>>& centroids) {
  int best = 0;
  double best_d = cosine_distance(x, centroids[0]);
  for (std::size_t c = 1; c < centroids.size(); ++c) {
    const double d = cosine_distance(x, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

struct KMeansRun {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
};

inline KMeansRun spherical_kmeans(const std::vector<std::vector<double>>& pts, std::vector<std::vector<double>> centroids) {
  const std::size_t n = pts.size();
  const std::size_t k = centroids.size();
  const std::size_t dim = pts.front().size();
  std::vector<int> labels(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) labels[i] = nearest_centroid(pts[i], centroids);
    std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
    std::vector<int> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& c = next[static_cast<std::size_t>(labels[i])];
      for (std::size_t j = 0; j < dim; ++j) c[j] += pts[i][j];
      ++sizes[static_cast<std::size_t>(labels[i])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] > 0) {
        for (double& v : next[c]) v /= sizes[c];
        normalize_in_place(next[c]);
        continue;
      }
      // Empty cluster: re-seed from the point farthest from its centroid.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = cosine_distance(pts[i], centroids[static_cast<std::size_t>(labels[i])]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      next[c] = pts[far];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < dim; ++j) shift = std::max(shift, std::abs(next[c][j] - centroids[c][j]));
    centroids = std::move(next);
    if (shift < 1e-6) break;
  }
  KMeansRun run;
  run.centroids = std::move(centroids);
  run.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    run.labels[i] = nearest_centroid(pts[i], run.centroids);
    run.inertia += cosine_distance(pts[i], run.centroids[static_cast<std::size_t>(run.labels[i])]);
  }
  return run;
}

}  // namespace detail

/// Spherical k-means (cosine distance) on mean-centred vectors with seeded
/// k-means++ initialization. The first of four restarts seeds one centroid
/// at the normalized mean, which keeps inertia non-increasing in k.
inline ClusterAssignment cluster_clients(const std::map<ClientId, std::vector<double>>& vectors, int k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("client cluster: k must be >= 1");
  if (static_cast<std::size_t>(k) > vectors.size())
    throw ValidationError("client cluster: k = " + std::to_string(k) + " exceeds the number of clients (" +
                          std::to_string(vectors.size()) + ")");
  const std::size_t dim = vectors.begin()->second.size();
  std::vector<ClientId> ids;
  std::vector<std::vector<double>> pts;
  std::vector<double> mean(dim, 0.0);
  for (const auto& [id, v] : vectors) {
    if (v.size() != dim) throw ShapeError("client cluster: vectors differ in length");
    ids.push_back(id);
    pts.push_back(v);
    for (std::size_t j = 0; j < dim; ++j) mean[j] += v[j];
  }
  for (double& m : mean) m /= static_cast<double>(pts.size());
  for (auto& p : pts) {
    for (std::size_t j = 0; j < dim; ++j) p[j] -= mean[j];
    detail::normalize_in_place(p);
  }
  std::vector<double> global(dim, 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < dim; ++j) global[j] += p[j];
  for (double& g : global) g /= static_cast<double>(pts.size());
  detail::normalize_in_place(global);

  const std::size_t n = pts.size();
  auto kmeanspp = [&](Rng& rng, std::vector<std::vector<double>> centroids) {
    std::vector<bool> used(n, false);
    if (centroids.empty()) {
      const auto first = static_cast<std::size_t>(rng.below(n));
      used[first] = true;
      centroids.push_back(pts[first]);
    }
    while (centroids.size() < static_cast<std::size_t>(k)) {
      std::vector<double> d2(n, 0.0);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double best = cosine_distance(pts[i], centroids[0]);
        for (std::size_t c = 1; c < centroids.size(); ++c) best = std::min(best, cosine_distance(pts[i], centroids[c]));
        d2[i] = used[i] ? 0.0 : best * best;
        total += d2[i];
      }
      std::size_t pick = n;
      if (total > 0.0) {
        const double u = rng.uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (d2[i] > 0.0 && u < acc) {
            pick = i;
            break;
          }
        }
        if (pick == n) {
          for (std::size_t i = n; i-- > 0;) {
            if (d2[i] > 0.0) {
              pick = i;
              break;
            }
          }
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          if (!used[i]) {
            pick = i;
            break;
          }
        }
      }
      used[pick] = true;
      centroids.push_back(pts[pick]);
    }
    return centroids;
  };

  Rng rng(mix_seed(seed, 0x6b6d6e73ULL));
  detail::KMeansRun best;
  bool have = false;
  for (int restart = 0; restart < 4; ++restart) {
    std::vector<std::vector<double>> init;
    if (restart == 0) init.push_back(global);
    auto run = detail::spherical_kmeans(pts, kmeanspp(rng, std::move(init)));
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }

  ClusterAssignment out;
  out.k = k;
  out.centroids = std::move(best.centroids);
  out.inertia = best.inertia;
  for (std::size_t i = 0; i < n; ++i) out.assignment.emplace(ids[i], best.labels[i]);
  return out;
}

}  // namespace flsim
