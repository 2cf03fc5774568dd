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

// Discrete-event orchestration of a whole experiment: data generation,
// client selection, broadcast, local training, upload, aggregation in every
// supported mode, lineage recording, deployment, monitoring and incentives.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flsim/aggregation.hpp"
#include "flsim/client.hpp"
#include "flsim/common.hpp"
#include "flsim/config.hpp"
#include "flsim/data.hpp"
#include "flsim/deployment.hpp"
#include "flsim/ledger.hpp"
#include "flsim/model.hpp"
#include "flsim/net.hpp"
#include "flsim/server.hpp"
#include "flsim/wire.hpp"

namespace flsim {

struct RoundMetrics {
  std::uint32_t round = 0;
  std::string version_id;
  double global_acc = 0.0;
  double global_loss = 0.0;
  std::size_t n_selected = 0;
  std::size_t n_received = 0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::vector<std::string> triggers;
};

struct MonitorRecord {
  std::uint32_t round = 0;
  double deployed_acc = 0.0;
  double window_mean = 0.0;
  MonitorAction action = MonitorAction::None;
};

/// One message as it would appear on the wire.
struct WireCapture {
  const char* msg;
  std::uint32_t round;
  std::uint32_t from;
  std::uint32_t to;
  const Bytes& bytes;
};

using WireTap = std::function<void(const WireCapture&)>;

struct RunResult {
  std::vector<RoundMetrics> metrics;
  std::vector<json> events;
  CoVersionLedger ledger;
  PayloadArchive archive;
  ClientRegistry registry;
  std::vector<DeploymentRecord> deployments;
  IncentiveLedger incentives;
  std::vector<MonitorRecord> monitor;
  std::vector<double> deployed_accuracy;  // per round, mean local test accuracy of deployed models
  std::optional<ClusterAssignment> clusters;
  ParameterVector final_global;
  std::string final_version;
  std::size_t accepted_arrivals = 0;
  std::size_t failed_rounds = 0;
  bool starved = false;
  bool diverged = false;

  /// 0 ok, 3 a round was skipped for lack of eligible clients, 4 a client diverged.
  int exit_code() const noexcept { return diverged ? 4 : (starved ? 3 : 0); }
};

class Simulation {
 public:
  explicit Simulation(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    derive_seeds();
    setup();
  }

  /// Installed taps see the full byte image of every transmitted message.
  void set_wire_tap(WireTap tap) { tap_ = std::move(tap); }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const std::vector<ClientShard>& shards() const noexcept { return shards_; }
  const Dataset& holdout() const noexcept { return holdout_; }
  const ParameterVector& initial_params() const noexcept { return job_.package.params; }

  RunResult run() {
    if (ran_) throw ValidationError("simulation: run() may only be called once");
    ran_ = true;
    record_root();
    switch (cfg_.job.aggregation_mode) {
      case AggregationMode::async:
        run_async();
        break;
      case AggregationMode::decentralised:
        for (std::uint32_t r = 1; r <= rounds(); ++r) {
          begin_round(r);
          const bool ok = run_decentralised_round(r);
          close_round(r, ok);
        }
        break;
      default:
        for (std::uint32_t r = 1; r <= rounds(); ++r) {
          begin_round(r);
          const bool ok = run_sync_round(r);
          close_round(r, ok);
        }
        break;
    }
    out_.registry = registry_;
    out_.final_global = global_;
    out_.final_version = current_version_;
    out_.clusters = clusters_;
    return std::move(out_);
  }

 private:
  enum class Msg { broadcast, upload, edge_model, wave };

  struct Event {
    Msg msg = Msg::broadcast;
    ClientId client{};
    std::uint32_t edge = 0;
    std::uint32_t round = 0;
  };

  struct RoundAcc {
    std::size_t n_selected = 0;
    std::size_t n_received = 0;
    std::uint64_t up = 0;
    std::uint64_t down = 0;
    std::vector<std::string> triggers;
  };

  // -------------------------------------------------------------------------
  // Setup
  // -------------------------------------------------------------------------

  void derive_seeds() {
    const std::uint64_t m = cfg_.seed;
    synth_ = cfg_.synthetic;
    synth_.seed = mix_seed(m, 0x64617461ULL, cfg_.synthetic.seed);
    pspec_ = cfg_.partition;
    pspec_.seed = mix_seed(m, 0x70617274ULL, cfg_.partition.seed);
    net_cfg_ = cfg_.net;
    net_cfg_.seed = mix_seed(m, 0x6e6574ULL, cfg_.net.seed);
    hp_seed_ = mix_seed(m, 0x6870ULL, cfg_.job.hp.seed);
    sel_seed_ = mix_seed(m, 0x73656cULL);
    mask_seed_ = mix_seed(m, 0x6d61736bULL);
  }

  void setup() {
    JobConfig jc = cfg_.job;
    jc.seed = mix_seed(cfg_.seed, 0x6a6f62ULL, cfg_.job.seed);
    job_ = create_job(jc);
    global_ = job_.package.params;
    current_version_ = job_.package.version_id;
    shared_len_ = has(Component::multitask) ? cfg_.job.arch.body_count() : cfg_.job.arch.parameter_count();
    network_ = Network(net_cfg_);

    shards_ = partition(pspec_, synth_, cfg_.n_clients);
    holdout_ = make_holdout(synth_, cfg_.holdout_samples);
    for (const auto& s : shards_) {
      const ClientId c = s.client_id;
      Rng rng(mix_seed(cfg_.seed, 0x726573ULL, to_u32(c)));
      resource_[c] = rng.uniform(cfg_.client.min_resource_score, 1.0);
      personal_[c] = PersonalState{has(Component::multitask) ? cfg_.job.arch.body_count() : 0, std::nullopt};
      node_state_.emplace(c, global_);
      raw_label_dist_[c] = label_distribution(s);
    }

    if (has(Component::heterogeneous_handler)) {
      for (auto& s : shards_) augment(s);
    }
    if (has(Component::registry)) {
      for (const auto& s : shards_)
        registry_.register_client(s.client_id, resource_.at(s.client_id), 0.0, static_cast<int>(s.train.size()));
    }
    if (has(Component::cluster)) recluster(0);
  }

  void augment(ClientShard& s) {
    const int k = cfg_.synthetic.num_classes;
    std::vector<double> target = cfg_.augment_target ? *cfg_.augment_target : uniform_weights(k);
    const std::uint64_t seed = mix_seed(cfg_.seed, 0x617567ULL, to_u32(s.client_id));
    const double before = total_variation(label_distribution(s), target);
    try {
      s = augment_balance(s, target, 0.1 * cfg_.synthetic.noise_sigma, seed);
    } catch (const ValidationError&) {
      // Classes absent from the shard cannot be synthesised; balance over
      // the ones that are present.
      double mass = 0.0;
      for (int c = 0; c < k; ++c) {
        if (s.label_histogram[static_cast<std::size_t>(c)] == 0) target[static_cast<std::size_t>(c)] = 0.0;
        mass += target[static_cast<std::size_t>(c)];
      }
      if (!(mass > 0.0)) return;
      for (double& v : target) v /= mass;
      s = augment_balance(s, target, 0.1 * cfg_.synthetic.noise_sigma, seed);
    }
    log({{"kind", "augment"},
         {"client", to_u32(s.client_id)},
         {"tv_before", before},
         {"tv_after", total_variation(label_distribution(s), target)},
         {"n_train", s.train.size()}});
  }

  void recluster(std::uint32_t round) {
    std::map<ClientId, std::vector<double>> vectors;
    if (cfg_.cluster.features == "update_direction" && last_delta_.size() >= static_cast<std::size_t>(cfg_.cluster.k)) {
      vectors = last_delta_;
    } else {
      vectors = raw_label_dist_;
    }
    clusters_ = cluster_clients(vectors, cfg_.cluster.k, mix_seed(cfg_.seed, 0x636c7573ULL, round));
    log({{"kind", "cluster"}, {"round", round}, {"k", clusters_->k}, {"inertia", clusters_->inertia}});
  }

  // -------------------------------------------------------------------------
  // Helpers
  // -------------------------------------------------------------------------

  bool has(Component c) const { return cfg_.job.has(c); }
  std::uint32_t rounds() const { return static_cast<std::uint32_t>(cfg_.job.rounds); }
  const ClientShard& shard(ClientId c) const { return shards_.at(to_u32(c)); }
  ClientShard& shard(ClientId c) { return shards_.at(to_u32(c)); }

  void log(json ev) {
    json line = json::object();
    line["t"] = queue_.now();
    for (auto& [k, v] : ev.items()) line[k] = v;
    out_.events.push_back(std::move(line));
  }

  std::uint32_t edge_of(ClientId c) const {
    if (clusters_) {
      const auto it = clusters_->assignment.find(c);
      if (it != clusters_->assignment.end()) return static_cast<std::uint32_t>(it->second);
    }
    return to_u32(c) % static_cast<std::uint32_t>(cfg_.hierarchical.n_edges);
  }

  /// Sends one message through the simulated network, accounting its bytes
  /// to `round` and reporting it to the wire tap.
  template <typename Build>
  Envelope transmit(const char* msg, std::uint32_t round, std::uint32_t from, std::uint32_t to, std::uint64_t bytes,
                    bool downlink, Build&& build) {
    if (tap_) {
      const Bytes img = build();
      if (img.size() != bytes) throw ValidationError(std::string("wire size mismatch for ") + msg);
      tap_(WireCapture{msg, round, from, to, img});
    }
    const Envelope env = network_.send(from, to, bytes, queue_.now());
    auto& acc = rounds_[round];
    (downlink ? acc.down : acc.up) += bytes;
    json ev{{"kind", "send"},  {"round", round}, {"msg", msg},       {"from", node_name(from)},
            {"to", node_name(to)}, {"bytes", bytes}, {"seq", env.seq}};
    if (env.delivered_at) {
      ev["outcome"] = "delivered";
      ev["at"] = *env.delivered_at;
    } else {
      ev["outcome"] = "dropped";
    }
    log(std::move(ev));
    return env;
  }

  ModelPackage package_for(ClientId c, std::uint32_t round, const ParameterVector& params, const std::string& version) const {
    ModelPackage pkg{version, params, cfg_.job.hp, cfg_.job.arch};
    pkg.hp.seed = mix_seed(hp_seed_, round, to_u32(c));
    return pkg;
  }

  double compute_time(ClientId c) const {
    return static_cast<double>(cfg_.job.hp.epochs) * static_cast<double>(shard(c).train.size()) *
           cfg_.client.compute_s_per_sample / resource_.at(c);
  }

  ClientOptions client_options(std::uint32_t round, const std::optional<SecureContext>& secure) const {
    ClientOptions o;
    o.gate = cfg_.gate;
    if (has(Component::compressor)) o.compression = cfg_.compression;
    o.multitask = has(Component::multitask);
    o.secure = secure;
    o.round = round;
    return o;
  }

  /// Local training step shared by every mode. Returns the result and logs it.
  BroadcastResult train_client(ClientId c, const ModelPackage& pkg, std::uint32_t round,
                               const std::optional<SecureContext>& secure) {
    BroadcastResult res = handle_broadcast(pkg, shard(c), client_options(round, secure), &personal_.at(c));
    log({{"kind", "local_train"},
         {"round", round},
         {"client", to_u32(c)},
         {"purpose", "round"},
         {"base_version", pkg.version_id}});
    return res;
  }

  /// Client-resident bookkeeping once local work for a round is finished.
  void finish_client(ClientId c, std::uint32_t round, const ModelPackage& pkg, const BroadcastResult& res) {
    if (res.state) personal_[c] = *res.state;
    if (res.local_model) {
      std::vector<double> delta(res.local_model->size());
      for (std::size_t j = 0; j < delta.size(); ++j) delta[j] = (*res.local_model)[j] - pkg.params[j];
      last_delta_[c] = std::move(delta);
    }
    if (const auto* w = std::get_if<Withheld>(&res.outcome)) {
      if (w->reason == WithholdReason::divergence) out_.diverged = true;
      log({{"kind", "withheld"}, {"round", round}, {"client", to_u32(c)}, {"reason", to_string(w->reason)},
           {"detail", w->detail}});
    }
  }

  RoundPlan make_plan(std::uint32_t r) {
    RoundPlan plan;
    if (has(Component::registry)) {
      const SelectionCriteria crit = has(Component::selector) ? cfg_.job.selection : SelectionCriteria{};
      plan = select_clients(registry_, crit, cfg_.job.fraction_per_round, r, sel_seed_);
    } else {
      std::vector<ClientId> ids;
      for (const auto& s : shards_) ids.push_back(s.client_id);
      plan.round_index = r;
      plan.selected = sample_uniform(ids, selection_count(cfg_.job.fraction_per_round, ids.size()), sel_seed_, r);
    }
    plan.base_global_version = current_version_;
    if (!busy_.empty()) {
      std::erase_if(plan.selected, [&](ClientId c) { return busy_.count(c) > 0; });
      if (plan.selected.empty())
        throw StarvationError("client selector: every selected client is still busy in round " + std::to_string(r));
    }
    return plan;
  }

  void participation(ClientId c, const EvalReport& eval) {
    if (has(Component::registry)) registry_.record_participation(c, eval);
  }

  void begin_round(std::uint32_t r) {
    if (has(Component::registry)) {
      for (const ClientId c : registry_.dropped_ids()) {
        registry_.register_client(c, resource_.at(c), queue_.now(), static_cast<int>(shard(c).train.size()));
        log({{"kind", "rejoin"}, {"round", r}, {"client", to_u32(c)}});
      }
    }
    if (cfg_.drift.round && static_cast<std::uint32_t>(*cfg_.drift.round) == r) inject_drift(r);
  }

  /// Label flip y -> (y + 1) mod K on a seeded subset of clients.
  void inject_drift(std::uint32_t r) {
    std::vector<ClientId> ids;
    for (const auto& s : shards_) ids.push_back(s.client_id);
    Rng rng(mix_seed(cfg_.seed, 0x64726966ULL));
    rng.shuffle(ids);
    const auto count = selection_count(cfg_.drift.fraction_clients, ids.size());
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    const int k = cfg_.synthetic.num_classes;
    json flipped = json::array();
    for (const ClientId c : ids) {
      ClientShard& s = shard(c);
      auto flip = [k](const Dataset& d) {
        std::vector<int> y = d.labels();
        for (int& v : y) v = (v + 1) % k;
        return d.relabeled(y);
      };
      s.train = flip(s.train);
      s.test = flip(s.test);
      s.label_histogram = s.train.label_histogram();
      flipped.push_back(to_u32(c));
    }
    log({{"kind", "drift"}, {"round", r}, {"clients", flipped}});
  }

  // -------------------------------------------------------------------------
  // Versions
  // -------------------------------------------------------------------------

  void record_root() {
    GlobalVersionRecord root;
    root.version_id = current_version_;
    root.params_hash = out_.archive.put(canonical_global_encoding(global_));
    root.aggregation_mode = to_string(cfg_.job.aggregation_mode);
    root.param_count = global_.size();
    root.shared_len = shared_len_;
    out_.ledger.record(std::move(root));
    versions_.emplace(current_version_, global_);
    version_index_.emplace(current_version_, 0);
  }

  ContributorRecord contributor(const UpdateEnvelope& env, std::optional<std::uint32_t> edge) {
    ContributorRecord c;
    c.client_id = env.client_id;
    c.local_params_hash = fnv1a64(payload_message(env));
    if (cfg_.archive_payloads) out_.archive.put(payload_message(env));
    c.n_samples = env.n_samples;
    c.local_eval = env.local_eval;
    c.base_version_id = env.base_version_id;
    c.encoding = payload_encoding(env.payload);
    if (const auto* cu = std::get_if<CompressedUpdate>(&env.payload)) c.bits = cu->bits;
    c.edge_id = edge;
    return c;
  }

  void mint(ParameterVector params, std::uint32_t round, std::vector<ContributorRecord> contributors, double alpha = 1.0,
            std::uint64_t staleness = 0) {
    const std::string id = "g" + std::to_string(out_.ledger.records().size());
    GlobalVersionRecord rec;
    rec.version_id = id;
    rec.parent_version_id = current_version_;
    rec.params_hash = params_hash(params);
    rec.contributors = std::move(contributors);
    rec.created_at_round = round;
    rec.aggregation_mode = to_string(cfg_.job.aggregation_mode);
    rec.param_count = params.size();
    rec.shared_len = shared_len_;
    rec.alpha = alpha;
    rec.staleness = staleness;
    out_.ledger.record(std::move(rec));
    version_index_.emplace(id, version_index_.size());
    versions_.emplace(id, params);
    global_ = std::move(params);
    current_version_ = id;
    log({{"kind", "aggregate"}, {"round", round}, {"version", id}});
  }

  void accrue(const std::vector<Contribution>& contributors, std::uint32_t round) {
    if (has(Component::incentives) && !contributors.empty())
      accrue_incentive(out_.incentives, contributors, cfg_.incentive_rate, round);
  }

  /// Per-cluster fedavg of the visible contributions of the last aggregation.
  void stash_cluster_models(const std::vector<WeightedUpdate>& updates) {
    cluster_updates_.clear();
    if (!clusters_) return;
    for (const auto& u : updates) {
      const auto it = clusters_->assignment.find(u.client);
      if (it != clusters_->assignment.end()) cluster_updates_[it->second].push_back(u);
    }
  }

  // -------------------------------------------------------------------------
  // Synchronous rounds (fedavg, secure, hierarchical)
  // -------------------------------------------------------------------------

  bool run_sync_round(std::uint32_t r) {
    const bool secure = cfg_.job.aggregation_mode == AggregationMode::secure;
    const bool hier = cfg_.job.aggregation_mode == AggregationMode::hierarchical;
    auto& acc = rounds_[r];
    for (int attempt = 0;; ++attempt) {
      const double t0 = queue_.now();
      RoundPlan plan;
      try {
        plan = make_plan(r);
      } catch (const StarvationError& e) {
        out_.starved = true;
        log({{"kind", "starved"}, {"round", r}, {"detail", e.what()}});
        return false;
      }
      acc.n_selected = plan.selected.size();
      acc.n_received = 0;
      if (secure && plan.selected.size() < 2) {
        log({{"kind", "round_failed"}, {"round", r}, {"reason", "secure cohort smaller than 2"}});
        return false;
      }
      std::optional<SecureContext> sctx;
      if (secure) sctx = SecureContext{plan.selected, mix_seed(mask_seed_, r, static_cast<std::uint64_t>(attempt))};
      log({{"kind", "round_start"}, {"round", r}, {"attempt", attempt}, {"base_version", plan.base_global_version},
           {"selected", ids_json(plan.selected)}});

      const ParameterVector base = global_;
      const std::string base_version = current_version_;
      const std::size_t d = base.size();
      const double deadline = t0 + cfg_.deadline_s;
      const double edge_deadline = t0 + cfg_.hierarchical.edge_deadline_s;

      std::map<ClientId, ModelPackage> packages;
      std::map<ClientId, BroadcastResult> results;
      std::map<ClientId, UpdateEnvelope> accepted;

      struct EdgeBuf {
        std::vector<ClientId> expected;
        std::vector<UpdateEnvelope> got;
        bool flushed = false;
      };
      std::map<std::uint32_t, EdgeBuf> edges;
      std::map<std::uint32_t, std::vector<UpdateEnvelope>> in_flight_edges;
      std::map<std::uint32_t, std::vector<UpdateEnvelope>> accepted_edges;
      if (hier) {
        for (const ClientId c : plan.selected) edges[edge_of(c)].expected.push_back(c);
        if (std::isfinite(cfg_.hierarchical.edge_deadline_s)) {
          for (const auto& [e, buf] : edges) queue_.schedule(edge_deadline, EventKind::Timer, Event{Msg::edge_model, {}, e, r});
        }
      }

      auto flush = [&](std::uint32_t e) {
        EdgeBuf& buf = edges.at(e);
        if (buf.flushed) return;
        buf.flushed = true;
        if (buf.got.empty()) return;
        std::vector<WeightedUpdate> member_updates;
        for (const auto& env : buf.got) member_updates.push_back({env.client_id, reconstruct_update(env, base), env.n_samples});
        const EdgeModel em = edge_aggregate(e, member_updates);
        const std::uint32_t from = edge_node(e);
        const Envelope net = transmit("edge_model", r, from, kServerNode, edge_message_bytes(em.params.size()), false, [&] {
          return encode_edge(r, from, em.params.values(), static_cast<double>(em.weight));
        });
        log({{"kind", "edge_flush"}, {"round", r}, {"edge", e}, {"members", buf.got.size()}});
        if (net.delivered_at) {
          queue_.schedule(*net.delivered_at, EventKind::Deliver, Event{Msg::edge_model, {}, e, r});
          in_flight_edges[e] = buf.got;
        }
      };

      for (const ClientId c : plan.selected) {
        packages.emplace(c, package_for(c, r, base, base_version));
        const Envelope net = transmit("broadcast", r, kServerNode, to_u32(c), dense_message_bytes(d), true, [&] {
          return encode_dense(MessageKind::broadcast, r, kServerNode, base.values());
        });
        if (net.delivered_at) queue_.schedule(*net.delivered_at, EventKind::Deliver, Event{Msg::broadcast, c, 0, r});
      }

      while (true) {
        auto ev = queue_.next();
        if (!ev) {
          bool flushed_any = false;
          for (auto& [e, buf] : edges) {
            if (!buf.flushed && !buf.got.empty()) {
              flush(e);
              flushed_any = true;
            }
          }
          if (flushed_any) continue;
          break;
        }
        const Event& p = ev->payload;
        if (ev->kind == EventKind::Deliver && p.msg == Msg::broadcast) {
          auto res = train_client(p.client, packages.at(p.client), r, sctx);
          results.insert_or_assign(p.client, std::move(res));
          queue_.schedule(queue_.now() + compute_time(p.client), EventKind::ClientDone, Event{Msg::broadcast, p.client, 0, r});
        } else if (ev->kind == EventKind::ClientDone) {
          const BroadcastResult& res = results.at(p.client);
          finish_client(p.client, r, packages.at(p.client), res);
          if (!res.uploaded()) continue;
          const UpdateEnvelope& env = std::get<UpdateEnvelope>(res.outcome);
          const std::uint32_t e = hier ? edge_of(p.client) : 0;
          const std::uint32_t to = hier ? edge_node(e) : kServerNode;
          const Envelope net = transmit("upload", r, to_u32(p.client), to, env.bytes, false, [&] { return serialize(env); });
          if (net.delivered_at) queue_.schedule(*net.delivered_at, EventKind::Deliver, Event{Msg::upload, p.client, e, r});
        } else if (ev->kind == EventKind::Deliver && p.msg == Msg::upload) {
          const UpdateEnvelope& env = std::get<UpdateEnvelope>(results.at(p.client).outcome);
          if (hier) {
            EdgeBuf& buf = edges.at(p.edge);
            if (!buf.flushed && queue_.now() <= edge_deadline) {
              buf.got.push_back(env);
              log({{"kind", "edge_receive"}, {"round", r}, {"edge", p.edge}, {"client", to_u32(p.client)}});
              if (buf.got.size() == buf.expected.size()) flush(p.edge);
            } else {
              log({{"kind", "late"}, {"round", r}, {"client", to_u32(p.client)}, {"at", node_name(edge_node(p.edge))}});
            }
          } else if (queue_.now() <= deadline) {
            accepted.emplace(p.client, env);
          } else {
            log({{"kind", "late"}, {"round", r}, {"client", to_u32(p.client)}, {"at", "server"}});
          }
        } else if (ev->kind == EventKind::Timer && p.msg == Msg::edge_model) {
          flush(p.edge);
        } else if (ev->kind == EventKind::Deliver && p.msg == Msg::edge_model) {
          if (queue_.now() <= deadline) {
            accepted_edges[p.edge] = in_flight_edges.at(p.edge);
          } else {
            log({{"kind", "late"}, {"round", r}, {"edge", p.edge}, {"at", "server"}});
          }
        }
      }

      std::vector<std::pair<UpdateEnvelope, std::optional<std::uint32_t>>> received;
      if (hier) {
        for (const auto& [e, envs] : accepted_edges)
          for (const auto& env : envs) received.emplace_back(env, e);
        std::sort(received.begin(), received.end(),
                  [](const auto& a, const auto& b) { return a.first.client_id < b.first.client_id; });
      } else {
        for (const auto& [c, env] : accepted) received.emplace_back(env, std::nullopt);
      }
      acc.n_received = received.size();

      std::set<ClientId> got_ids;
      for (const auto& [env, e] : received) got_ids.insert(env.client_id);
      std::vector<ClientId> missing;
      for (const ClientId c : plan.selected) {
        if (!got_ids.count(c)) missing.push_back(c);
      }
      if (has(Component::registry)) {
        for (const ClientId c : missing) registry_.mark_dropped(c);
      }

      if (secure && !missing.empty()) {
        log({{"kind", "secure_abort"}, {"round", r}, {"attempt", attempt}, {"missing", ids_json(missing)}});
        // Dropped members stay out of the retry cohort when the registry is on.
        if (attempt < cfg_.secure.max_retries) continue;
        log({{"kind", "round_failed"}, {"round", r}, {"reason", "secure aggregation aborted"}});
        acc.n_received = 0;
        return false;
      }
      if (received.size() < static_cast<std::size_t>(cfg_.min_updates)) {
        log({{"kind", "round_failed"}, {"round", r}, {"reason", "quorum not met"}, {"received", received.size()},
             {"min_updates", cfg_.min_updates}});
        return false;
      }

      std::vector<ContributorRecord> contributors;
      std::vector<Contribution> shares;
      for (const auto& [env, e] : received) {
        log({{"kind", "accept"}, {"round", r}, {"client", to_u32(env.client_id)}});
        contributors.push_back(contributor(env, e));
        shares.push_back({env.client_id, env.n_samples});
        participation(env.client_id, env.local_eval);
      }

      ParameterVector shared;
      std::vector<WeightedUpdate> visible;
      if (secure) {
        std::vector<MaskedUpdate> masked;
        for (const auto& [env, e] : received) masked.push_back(std::get<MaskedUpdate>(env.payload));
        shared = unmask_sum(masked, plan.selected);
      } else {
        for (const auto& [env, e] : received) visible.push_back({env.client_id, reconstruct_update(env, base), env.n_samples});
        if (hier) {
          std::map<std::uint32_t, std::vector<WeightedUpdate>> per_edge;
          for (std::size_t i = 0; i < received.size(); ++i) per_edge[*received[i].second].push_back(visible[i]);
          std::vector<EdgeModel> models;
          for (const auto& [e, ups] : per_edge) models.push_back(edge_aggregate(e, ups));
          shared = combine_edges(models);
        } else {
          shared = fedavg(visible);
        }
      }
      stash_cluster_models(visible);
      mint(splice_shared(base, shared), r, std::move(contributors));
      out_.accepted_arrivals += received.size();
      accrue(shares, r);
      return true;
    }
  }

  // -------------------------------------------------------------------------
  // Asynchronous waves
  // -------------------------------------------------------------------------

  void run_async() {
    std::map<ClientId, ModelPackage> packages;
    std::map<ClientId, BroadcastResult> results;
    std::uint32_t wave = 0;
    queue_.schedule(queue_.now(), EventKind::Timer, Event{Msg::wave, {}, 0, 1});

    while (auto ev = queue_.next()) {
      const Event& p = ev->payload;
      if (ev->kind == EventKind::Timer) {
        if (wave > 0) close_round(wave, true);
        wave = p.round;
        begin_round(wave);
        dispatch_wave(wave, packages);
        if (wave < rounds())
          queue_.schedule(queue_.now() + cfg_.async.wave_interval_s, EventKind::Timer, Event{Msg::wave, {}, 0, wave + 1});
      } else if (ev->kind == EventKind::Deliver && p.msg == Msg::broadcast) {
        auto res = train_client(p.client, packages.at(p.client), p.round, std::nullopt);
        results.insert_or_assign(p.client, std::move(res));
        queue_.schedule(queue_.now() + compute_time(p.client), EventKind::ClientDone, Event{Msg::broadcast, p.client, 0, p.round});
      } else if (ev->kind == EventKind::ClientDone) {
        busy_.erase(p.client);
        const BroadcastResult& res = results.at(p.client);
        finish_client(p.client, wave, packages.at(p.client), res);
        if (!res.uploaded()) continue;
        const UpdateEnvelope& env = std::get<UpdateEnvelope>(res.outcome);
        const Envelope net = transmit("upload", wave, to_u32(p.client), kServerNode, env.bytes, false, [&] { return serialize(env); });
        if (net.delivered_at) queue_.schedule(*net.delivered_at, EventKind::Deliver, Event{Msg::upload, p.client, 0, p.round});
      } else if (ev->kind == EventKind::Deliver && p.msg == Msg::upload) {
        merge_async(std::get<UpdateEnvelope>(results.at(p.client).outcome), wave);
      }
    }
    if (wave > 0) close_round(wave, true);
  }

  void dispatch_wave(std::uint32_t r, std::map<ClientId, ModelPackage>& packages) {
    RoundPlan plan;
    try {
      plan = make_plan(r);
    } catch (const StarvationError& e) {
      out_.starved = true;
      log({{"kind", "starved"}, {"round", r}, {"detail", e.what()}});
      return;
    }
    rounds_[r].n_selected = plan.selected.size();
    log({{"kind", "round_start"}, {"round", r}, {"attempt", 0}, {"base_version", current_version_},
         {"selected", ids_json(plan.selected)}});
    for (const ClientId c : plan.selected) {
      packages.insert_or_assign(c, package_for(c, r, global_, current_version_));
      const Envelope net = transmit("broadcast", r, kServerNode, to_u32(c), dense_message_bytes(global_.size()), true,
                                    [&] { return encode_dense(MessageKind::broadcast, r, kServerNode, global_.values()); });
      if (net.delivered_at) {
        busy_.insert(c);
        queue_.schedule(*net.delivered_at, EventKind::Deliver, Event{Msg::broadcast, c, 0, r});
      }
    }
  }

  void merge_async(const UpdateEnvelope& env, std::uint32_t wave) {
    const ParameterVector& base = versions_.at(env.base_version_id);
    const std::uint64_t staleness = version_index_.at(current_version_) - version_index_.at(env.base_version_id);
    const double alpha = staleness_weight(cfg_.async.alpha0, cfg_.async.a, staleness);
    const ParameterVector update = reconstruct_update(env, base);
    const ParameterVector shared = blend(leading(global_, shared_len_), update, alpha);
    log({{"kind", "accept"}, {"round", wave}, {"client", to_u32(env.client_id)}, {"staleness", staleness}, {"alpha", alpha}});
    std::vector<ContributorRecord> contributors{contributor(env, std::nullopt)};
    participation(env.client_id, env.local_eval);
    stash_cluster_models({WeightedUpdate{env.client_id, update, env.n_samples}});
    mint(splice_shared(global_, shared), wave, std::move(contributors), alpha, staleness);
    ++rounds_[wave].n_received;
    ++out_.accepted_arrivals;
    accrue({Contribution{env.client_id, env.n_samples}}, wave);
  }

  // -------------------------------------------------------------------------
  // Decentralised gossip
  // -------------------------------------------------------------------------

  const GossipGraph& graph() {
    if (!graph_) {
      std::vector<ClientId> ids;
      for (const auto& s : shards_) ids.push_back(s.client_id);
      if (ids.size() == 1) {
        graph_ = GossipGraph(ids, {});
      } else {
        graph_ = cfg_.decentralised.topology == "complete" ? GossipGraph::complete(ids) : GossipGraph::ring(ids);
      }
    }
    return *graph_;
  }

  bool run_decentralised_round(std::uint32_t r) {
    auto& acc = rounds_[r];
    RoundPlan plan;
    try {
      plan = make_plan(r);
    } catch (const StarvationError& e) {
      out_.starved = true;
      log({{"kind", "starved"}, {"round", r}, {"detail", e.what()}});
      return false;
    }
    acc.n_selected = plan.selected.size();
    log({{"kind", "round_start"}, {"round", r}, {"attempt", 0}, {"base_version", current_version_},
         {"selected", ids_json(plan.selected)}});

    std::map<ClientId, ModelPackage> packages;
    std::map<ClientId, BroadcastResult> results;
    for (const ClientId c : plan.selected) {
      packages.emplace(c, package_for(c, r, node_state_.at(c), current_version_));
      results.emplace(c, train_client(c, packages.at(c), r, std::nullopt));
      queue_.schedule(queue_.now() + compute_time(c), EventKind::ClientDone, Event{Msg::broadcast, c, 0, r});
    }
    std::vector<ClientId> shared_ids;
    std::map<ClientId, EvalReport> evals;
    while (auto ev = queue_.next()) {
      const ClientId c = ev->payload.client;
      const BroadcastResult& res = results.at(c);
      finish_client(c, r, packages.at(c), res);
      if (!res.uploaded()) continue;
      const auto& env = std::get<UpdateEnvelope>(res.outcome);
      node_state_.insert_or_assign(c, std::get<ParameterVector>(env.payload));
      shared_ids.push_back(c);
      evals.emplace(c, env.local_eval);
    }
    acc.n_received = shared_ids.size();
    if (shared_ids.size() < static_cast<std::size_t>(cfg_.min_updates)) {
      log({{"kind", "round_failed"}, {"round", r}, {"reason", "quorum not met"}, {"received", shared_ids.size()},
           {"min_updates", cfg_.min_updates}});
      return false;
    }

    for (const ClientId c : shared_ids) {
      log({{"kind", "accept"}, {"round", r}, {"client", to_u32(c)}});
      participation(c, evals.at(c));
    }

    const GossipGraph& g = graph();
    const auto& nodes = g.nodes();
    const std::size_t d = global_.size();
    for (int step = 0; step < cfg_.decentralised.gossip_steps; ++step) {
      std::set<std::pair<std::size_t, std::size_t>> delivered;
      double end = queue_.now();
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (const std::size_t j : g.neighbors(i)) {
          const ParameterVector& x = node_state_.at(nodes[i]);
          const Envelope net = transmit("gossip", r, to_u32(nodes[i]), to_u32(nodes[j]), dense_message_bytes(d), false, [&] {
            return encode_dense(MessageKind::gossip_state, r, to_u32(nodes[i]), x.values());
          });
          if (net.delivered_at) {
            delivered.insert({i, j});
            end = std::max(end, *net.delivered_at);
          }
        }
      }
      node_state_ = gossip_round(g, node_state_, [&](std::size_t j, std::size_t i) { return delivered.count({j, i}) > 0; });
      queue_.advance_to(end);
    }
    log({{"kind", "gossip"}, {"round", r}, {"steps", cfg_.decentralised.gossip_steps}, {"spread", spread(node_state_)}});

    std::vector<WeightedUpdate> states;
    std::vector<ContributorRecord> contributors;
    std::vector<Contribution> shares;
    for (const auto& [c, x] : node_state_) {
      UpdateEnvelope env;
      env.client_id = c;
      env.round = r;
      env.base_version_id = current_version_;
      env.n_samples = shard(c).train.size();
      env.payload = x;
      env.shared_len = x.size();
      env.local_eval = evaluate(x, cfg_.job.arch, shard(c).test);
      contributors.push_back(contributor(env, std::nullopt));
      states.push_back({c, x, env.n_samples});
    }
    for (const ClientId c : shared_ids) shares.push_back({c, shard(c).train.size()});
    stash_cluster_models(states);
    mint(fedavg(states), r, std::move(contributors));
    out_.accepted_arrivals += shared_ids.size();
    accrue(shares, r);
    return true;
  }

  // -------------------------------------------------------------------------
  // Post-aggregation stages
  // -------------------------------------------------------------------------

  void close_round(std::uint32_t r, bool aggregated) {
    if (!aggregated) ++out_.failed_rounds;
    auto& acc = rounds_[r];
    const EvalReport report = evaluate_global(global_, cfg_.job.arch, holdout_);
    const DeployOutcome decision = decide_deploy(report, cfg_.deploy);
    log({{"kind", "global_eval"}, {"round", r}, {"version", current_version_}, {"accuracy", report.accuracy},
         {"loss", report.loss}, {"decision", decision.deploy() ? "deploy" : "reject"}, {"reasons", decision.reasons}});

    if (decision.deploy()) deploy_round(r, decision);
    if (has(Component::monitor) && !deployed_.empty()) monitor_round(r, acc);
    out_.deployed_accuracy.push_back(deployed_.empty() ? std::numeric_limits<double>::quiet_NaN() : deployed_accuracy());
    if (has(Component::cluster) && cfg_.cluster.features == "update_direction" && aggregated) recluster(r);

    RoundMetrics m;
    m.round = r;
    m.version_id = current_version_;
    m.global_acc = report.accuracy;
    m.global_loss = report.loss;
    m.n_selected = acc.n_selected;
    m.n_received = acc.n_received;
    m.bytes_up = acc.up;
    m.bytes_down = acc.down;
    m.triggers = acc.triggers;
    out_.metrics.push_back(std::move(m));
  }

  std::vector<ClientId> deploy_targets() const {
    if (has(Component::registry)) return registry_.active_ids();
    std::vector<ClientId> ids;
    for (const auto& s : shards_) ids.push_back(s.client_id);
    return ids;
  }

  void deploy_round(std::uint32_t r, const DeployOutcome& decision) {
    const ModelPackage pkg{current_version_, global_, cfg_.job.hp, cfg_.job.arch};
    std::optional<ClusterModels> selector;
    if (has(Component::deployment_selector) && clusters_) {
      ClusterModels cm;
      cm.assignment = *clusters_;
      for (int k = 0; k < clusters_->k; ++k) {
        const auto it = cluster_updates_.find(k);
        cm.models.emplace(k, it == cluster_updates_.end() ? global_ : splice_shared(global_, fedavg(it->second)));
      }
      selector = std::move(cm);
    }
    const std::vector<ClientId> targets = deploy_targets();
    const Deployment dep = deploy(pkg, targets, decision, r, selector ? &*selector : nullptr);
    for (const ClientId c : targets) {
      ParameterVector model = dep.model_for(c);
      if (const auto& head = personal_.at(c).private_head) {
        std::vector<double> v = leading(model, shared_len_).vec();
        v.insert(v.end(), head->values().begin(), head->values().end());
        model = ParameterVector(std::move(v));
      }
      deployed_.insert_or_assign(c, std::move(model));
    }
    std::set<std::string> ids;
    for (const auto& [c, id] : dep.record.targets) ids.insert(id);
    log({{"kind", "deploy"}, {"round", r}, {"version", current_version_}, {"targets", targets.size()}, {"models", ids.size()}});
    out_.deployments.push_back(dep.record);
  }

  double deployed_accuracy() const {
    double s = 0.0;
    for (const auto& [c, model] : deployed_) s += evaluate(model, cfg_.job.arch, shard(c).test).accuracy;
    return s / static_cast<double>(deployed_.size());
  }

  void monitor_round(std::uint32_t r, RoundAcc& acc) {
    if (!monitor_) {
      monitor_.emplace();
      monitor_->window_size = static_cast<std::size_t>(cfg_.monitor.window);
      monitor_->threshold = cfg_.monitor.threshold;
      monitor_->cooldown_rounds = cfg_.monitor.cooldown_rounds;
      monitor_->band = cfg_.monitor.band;
    }
    const double a = deployed_accuracy();
    auto [state, action] = monitor_observe(*monitor_, static_cast<int>(r), a);
    monitor_ = std::move(state);
    out_.monitor.push_back({r, a, monitor_->mean(), action});
    if (action == MonitorAction::None) return;
    acc.triggers.emplace_back(to_string(action));
    log({{"kind", "trigger"}, {"round", r}, {"action", to_string(action)}, {"window_mean", monitor_->mean()}});
    if (action == MonitorAction::FineTune) {
      for (auto& [c, model] : deployed_) {
        Hyperparameters hp = cfg_.job.hp;
        hp.epochs = cfg_.monitor.fine_tune_epochs;
        hp.seed = mix_seed(hp_seed_, 0x6674ULL, r, to_u32(c));
        try {
          model = local_train(model, cfg_.job.arch, shard(c).train, hp);
        } catch (const DivergenceError&) {
          out_.diverged = true;
        }
        log({{"kind", "local_train"}, {"round", r}, {"client", to_u32(c)}, {"purpose", "fine_tune"}});
      }
    } else {
      log({{"kind", "new_job_alert"}, {"round", r}, {"window_mean", monitor_->mean()}});
    }
  }

  static json ids_json(const std::vector<ClientId>& ids) {
    json a = json::array();
    for (const ClientId c : ids) a.push_back(to_u32(c));
    return a;
  }

  ExperimentConfig cfg_;
  SyntheticSpec synth_;
  PartitionSpec pspec_;
  NetConfig net_cfg_;
  std::uint64_t hp_seed_ = 0;
  std::uint64_t sel_seed_ = 0;
  std::uint64_t mask_seed_ = 0;

  Job job_;
  ParameterVector global_;
  std::string current_version_;
  std::size_t shared_len_ = 0;
  std::map<std::string, ParameterVector> versions_;
  std::map<std::string, std::uint64_t> version_index_;

  std::vector<ClientShard> shards_;
  Dataset holdout_{1, 2};
  std::map<ClientId, double> resource_;
  std::map<ClientId, PersonalState> personal_;
  std::map<ClientId, std::vector<double>> raw_label_dist_;
  std::map<ClientId, std::vector<double>> last_delta_;
  NodeStates node_state_;
  std::optional<GossipGraph> graph_;
  std::set<ClientId> busy_;

  ClientRegistry registry_;
  std::optional<ClusterAssignment> clusters_;
  std::map<int, std::vector<WeightedUpdate>> cluster_updates_;
  std::map<ClientId, ParameterVector> deployed_;
  std::optional<MonitorState> monitor_;

  Network network_{NetConfig{}};
  EventQueue<Event> queue_;
  std::map<std::uint32_t, RoundAcc> rounds_;
  WireTap tap_;
  RunResult out_;
  bool ran_ = false;
};

/// Convenience wrapper: build and run.
inline RunResult run_experiment(const ExperimentConfig& cfg) { return Simulation(cfg).run(); }

}  // namespace flsim
