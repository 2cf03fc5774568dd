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

// Experiment configuration: strict JSON ingestion (unknown keys rejected with
// their full path) into typed settings for every pipeline component.

#pragma once

#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flsim/client.hpp"
#include "flsim/common.hpp"
#include "flsim/compression.hpp"
#include "flsim/data.hpp"
#include "flsim/deployment.hpp"
#include "flsim/net.hpp"
#include "flsim/server.hpp"

namespace flsim {

using json = nlohmann::json;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct AsyncConfig {
  double alpha0 = 0.6;
  double a = 0.5;
  double wave_interval_s = 0.2;
};

struct HierarchicalConfig {
  int n_edges = 2;
  double edge_deadline_s = kInf;
};

struct DecentralisedConfig {
  int gossip_steps = 5;
  std::string topology = "ring";  // ring | complete
};

struct SecureConfig {
  int max_retries = 3;
};

struct ClusterConfig {
  int k = 2;
  std::string features = "label_distribution";  // label_distribution | update_direction
};

struct MonitorConfig {
  int window = 5;
  double threshold = 0.8;
  int cooldown_rounds = 5;
  double band = 0.1;
  int fine_tune_epochs = 1;
};

struct DriftConfig {
  std::optional<int> round;  // label flip injected at the start of this round
  double fraction_clients = 1.0;
};

struct ClientSimConfig {
  double compute_s_per_sample = 1e-4;
  double min_resource_score = 0.1;
};

inline JobConfig default_job() {
  JobConfig j;
  j.arch = ArchDescriptor::logistic(8, 3);
  return j;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int n_clients = 10;
  JobConfig job = default_job();
  double deadline_s = kInf;
  int min_updates = 1;
  AsyncConfig async;
  HierarchicalConfig hierarchical;
  DecentralisedConfig decentralised;
  SecureConfig secure;

  SyntheticSpec synthetic;
  PartitionSpec partition;
  int holdout_samples = 1000;
  std::optional<std::vector<double>> augment_target;

  NetConfig net{10.0, 100.0, 0.05, kInf, 0};
  CompressionSpec compression{0.1, 8};
  GatePolicy gate;
  DeployPolicy deploy;
  MonitorConfig monitor;
  double incentive_rate = 1.0;
  ClusterConfig cluster;
  DriftConfig drift;
  ClientSimConfig client;
  bool archive_payloads = true;

  json source = json::object();  // canonical input document

  void validate() const {
    std::vector<std::string> issues = job.conflicts();
    auto check = [&](bool ok, const char* msg) {
      if (!ok) issues.emplace_back(msg);
    };
    check(n_clients >= 1, "n_clients must be >= 1");
    check(min_updates >= 1, "job.min_updates must be >= 1");
    check(deadline_s > 0.0, "job.deadline_s must be positive");
    check(holdout_samples >= 1, "global model evaluator: data.holdout_samples must be >= 1");
    check(job.arch.input_dim == synthetic.input_dim, "job.arch.input_dim must match data.synthetic.input_dim");
    check(job.arch.num_classes == synthetic.num_classes, "job.arch.num_classes must match data.synthetic.num_classes");
    check(async.wave_interval_s > 0.0, "job.async.wave_interval_s must be positive");
    check(hierarchical.n_edges >= 1, "job.hierarchical.n_edges must be >= 1");
    check(decentralised.gossip_steps >= 0, "job.decentralised.gossip_steps must be >= 0");
    check(decentralised.topology == "ring" || decentralised.topology == "complete",
          "job.decentralised.topology must be ring or complete");
    check(secure.max_retries >= 0, "job.secure.max_retries must be >= 0");
    check(!job.secure() || n_clients >= 2, "secure aggregator needs at least 2 clients");
    check(cluster.k >= 1 && cluster.k <= n_clients, "cluster.k must be in [1, n_clients]");
    check(cluster.features == "label_distribution" || cluster.features == "update_direction",
          "cluster.features must be label_distribution or update_direction");
    check(monitor.window >= 1, "monitor.window must be >= 1");
    check(monitor.cooldown_rounds >= 0, "monitor.cooldown_rounds must be >= 0");
    check(monitor.fine_tune_epochs >= 1, "monitor.fine_tune_epochs must be >= 1");
    check(incentive_rate >= 0.0, "incentive registry: incentives.rate_per_round must be non-negative");
    check(drift.fraction_clients > 0.0 && drift.fraction_clients <= 1.0, "drift.fraction_clients must be in (0, 1]");
    check(client.compute_s_per_sample >= 0.0, "client.compute_s_per_sample must be non-negative");
    check(client.min_resource_score > 0.0 && client.min_resource_score <= 1.0,
          "client.min_resource_score must be in (0, 1]");
    auto guarded = [&](auto&& fn) {
      try {
        fn();
      } catch (const Error& e) {
        issues.emplace_back(e.what());
      }
    };
    guarded([&] { synthetic.validate(); });
    guarded([&] { net.validate(); });
    guarded([&] { compression.validate(); });
    guarded([&] {
      if (job.aggregation_mode == AggregationMode::async) validate_async(async.alpha0, async.a);
    });
    if (augment_target) {
      guarded([&] { detail::check_probability_vector(*augment_target, static_cast<std::size_t>(synthetic.num_classes), "data.augment_target"); });
    }
    if (!issues.empty()) {
      std::string msg = "invalid experiment configuration:";
      for (const auto& s : issues) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
  }
};

namespace detail {

/// Reads one JSON object, remembering which keys were consumed so that any
/// leftover key can be reported with its full path.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config: '" + display() + "' must be an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + child(key) + "' has the wrong type");
    }
  }

  /// null means +infinity.
  void read_extended(const std::string& key, double& out) {
    used_.insert(key);
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (v.is_null()) {
      out = kInf;
    } else if (v.is_number()) {
      out = v.get<double>();
    } else {
      throw ConfigError("config: '" + child(key) + "' must be a number or null");
    }
  }

  template <typename E>
  void read_enum(const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& names) {
    used_.insert(key);
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (v.is_string()) {
      for (const auto& [name, value] : names) {
        if (v.get<std::string>() == name) {
          out = value;
          return;
        }
      }
    }
    std::string allowed;
    for (const auto& [name, value] : names) allowed += (allowed.empty() ? "" : ", ") + name;
    throw ConfigError("config: '" + child(key) + "' must be one of: " + allowed);
  }

  ObjectReader object(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    return ObjectReader(obj_.contains(key) ? obj_.at(key) : empty, child(key));
  }

  const json* raw(const std::string& key) {
    used_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.count(key)) throw ConfigError("config: unknown key '" + child(key) + "'");
    }
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline ExperimentConfig parse_config(const json& doc) {
  using detail::ObjectReader;
  ExperimentConfig cfg;
  cfg.source = doc;
  ObjectReader root(doc, "");
  root.read("seed", cfg.seed);
  root.read("n_clients", cfg.n_clients);

  // data first: the arch defaults to its dimensions
  {
    auto data = root.object("data");
    {
      auto s = data.object("synthetic");
      s.read("num_classes", cfg.synthetic.num_classes);
      s.read("input_dim", cfg.synthetic.input_dim);
      s.read("class_mean_scale", cfg.synthetic.class_mean_scale);
      s.read("noise_sigma", cfg.synthetic.noise_sigma);
      s.read("samples_per_client", cfg.synthetic.samples_per_client);
      s.read("seed", cfg.synthetic.seed);
      s.finish();
    }
    {
      auto p = data.object("partition");
      p.read_enum("mode", cfg.partition.mode,
                  {{"iid", PartitionMode::iid},
                   {"dirichlet_label_skew", PartitionMode::dirichlet_label_skew},
                   {"quantity_skew", PartitionMode::quantity_skew},
                   {"clustered_label_skew", PartitionMode::clustered_label_skew}});
      p.read("alpha", cfg.partition.alpha);
      p.read("sigma", cfg.partition.sigma);
      p.read("n_groups", cfg.partition.n_groups);
      p.read("leak", cfg.partition.leak);
      p.read("seed", cfg.partition.seed);
      p.finish();
    }
    data.read("holdout_samples", cfg.holdout_samples);
    if (const json* t = data.raw("augment_target"); t && !t->is_null()) {
      try {
        cfg.augment_target = t->get<std::vector<double>>();
      } catch (const json::exception&) {
        throw ConfigError("config: 'data.augment_target' must be an array of numbers");
      }
    }
    data.finish();
  }

  {
    auto job = root.object("job");
    {
      auto a = job.object("arch");
      a.read_enum("kind", cfg.job.arch.kind, {{"logistic", ModelKind::logistic}, {"mlp", ModelKind::mlp}});
      cfg.job.arch.hidden_dim = cfg.job.arch.kind == ModelKind::mlp ? 16 : 0;
      cfg.job.arch.input_dim = cfg.synthetic.input_dim;
      cfg.job.arch.num_classes = cfg.synthetic.num_classes;
      a.read("hidden_dim", cfg.job.arch.hidden_dim);
      a.read("input_dim", cfg.job.arch.input_dim);
      a.read("num_classes", cfg.job.arch.num_classes);
      a.finish();
    }
    {
      auto h = job.object("hp");
      h.read("learning_rate", cfg.job.hp.learning_rate);
      h.read("epochs", cfg.job.hp.epochs);
      h.read("batch_size", cfg.job.hp.batch_size);
      h.read("l2", cfg.job.hp.l2);
      h.read("seed", cfg.job.hp.seed);
      h.finish();
    }
    job.read("rounds", cfg.job.rounds);
    job.read("fraction_per_round", cfg.job.fraction_per_round);
    {
      auto s = job.object("selection");
      s.read("min_resource", cfg.job.selection.min_resource);
      s.read("min_samples", cfg.job.selection.min_samples);
      s.read_enum("strategy", cfg.job.selection.strategy,
                  {{"uniform_random", SelectionStrategy::uniform_random},
                   {"top_resource", SelectionStrategy::top_resource},
                   {"top_accuracy", SelectionStrategy::top_accuracy}});
      s.finish();
    }
    job.read_enum("aggregation_mode", cfg.job.aggregation_mode,
                  {{"fedavg", AggregationMode::fedavg},
                   {"secure", AggregationMode::secure},
                   {"async", AggregationMode::async},
                   {"hierarchical", AggregationMode::hierarchical},
                   {"decentralised", AggregationMode::decentralised}});
    if (const json* comps = job.raw("optional_components")) {
      if (!comps->is_array()) throw ConfigError("config: 'job.optional_components' must be an array");
      for (std::size_t i = 0; i < comps->size(); ++i) {
        const auto& c = (*comps)[i];
        const auto it = c.is_string() ? component_names().find(c.get<std::string>()) : component_names().end();
        if (it == component_names().end())
          throw ConfigError("config: unknown component at 'job.optional_components[" + std::to_string(i) + "]'");
        cfg.job.optional_components.insert(it->second);
      }
    }
    job.read_enum("init_mode", cfg.job.init_mode, {{"zeros", InitMode::zeros}, {"seeded_uniform", InitMode::seeded_uniform}});
    job.read_extended("deadline_s", cfg.deadline_s);
    job.read("min_updates", cfg.min_updates);
    {
      auto a = job.object("async");
      a.read("alpha0", cfg.async.alpha0);
      a.read("a", cfg.async.a);
      a.read("wave_interval_s", cfg.async.wave_interval_s);
      a.finish();
    }
    {
      auto h = job.object("hierarchical");
      h.read("n_edges", cfg.hierarchical.n_edges);
      h.read_extended("edge_deadline_s", cfg.hierarchical.edge_deadline_s);
      h.finish();
    }
    {
      auto d = job.object("decentralised");
      d.read("gossip_steps", cfg.decentralised.gossip_steps);
      d.read("topology", cfg.decentralised.topology);
      d.finish();
    }
    {
      auto s = job.object("secure");
      s.read("max_retries", cfg.secure.max_retries);
      s.finish();
    }
    job.finish();
  }

  {
    auto n = root.object("net");
    n.read("latency_ms_min", cfg.net.latency_ms_min);
    n.read("latency_ms_max", cfg.net.latency_ms_max);
    n.read("dropout_prob", cfg.net.dropout_prob);
    n.read_extended("bandwidth_bytes_per_s", cfg.net.bandwidth_bytes_per_s);
    n.read("seed", cfg.net.seed);
    n.finish();
  }
  {
    auto c = root.object("compression");
    c.read("top_k", cfg.compression.top_k);
    c.read("bits", cfg.compression.bits);
    c.finish();
  }
  {
    auto g = root.object("gate");
    g.read("min_accuracy", cfg.gate.min_accuracy);
    g.read_extended("max_loss", cfg.gate.max_loss);
    g.finish();
  }
  {
    auto d = root.object("deploy");
    d.read("min_global_accuracy", cfg.deploy.min_global_accuracy);
    d.read_extended("max_global_loss", cfg.deploy.max_global_loss);
    d.finish();
  }
  {
    auto m = root.object("monitor");
    m.read("window", cfg.monitor.window);
    m.read("threshold", cfg.monitor.threshold);
    m.read("cooldown_rounds", cfg.monitor.cooldown_rounds);
    m.read("band", cfg.monitor.band);
    m.read("fine_tune_epochs", cfg.monitor.fine_tune_epochs);
    m.finish();
  }
  {
    auto i = root.object("incentives");
    i.read("rate_per_round", cfg.incentive_rate);
    i.finish();
  }
  {
    auto c = root.object("cluster");
    c.read("k", cfg.cluster.k);
    c.read("features", cfg.cluster.features);
    c.finish();
  }
  {
    auto d = root.object("drift");
    if (const json* r = d.raw("round"); r && !r->is_null()) {
      if (!r->is_number_integer()) throw ConfigError("config: 'drift.round' must be an integer or null");
      cfg.drift.round = r->get<int>();
    }
    d.read("fraction_clients", cfg.drift.fraction_clients);
    d.finish();
  }
  {
    auto c = root.object("client");
    c.read("compute_s_per_sample", cfg.client.compute_s_per_sample);
    c.read("min_resource_score", cfg.client.min_resource_score);
    c.finish();
  }
  root.read("archive_payloads", cfg.archive_payloads);
  root.finish();

  cfg.validate();
  return cfg;
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: '") + path + "' is not valid JSON: " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(load_json_file(path)); }

/// 16 hex digits identifying a (config, seed) pair.
inline std::string run_id(const ExperimentConfig& cfg) {
  json doc = cfg.source;
  doc.erase("seed");
  return hex64(fnv1a64(doc.dump()) ^ splitmix64(cfg.seed));
}

}  // namespace flsim
