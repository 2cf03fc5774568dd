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

// Post-training stages: global evaluation, deployment decision and
// (optionally cluster-targeted) deployment, incentive accrual, and the
// model monitor with its replacement trigger.

#pragma once

#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flsim/client.hpp"
#include "flsim/common.hpp"
#include "flsim/model.hpp"
#include "flsim/server.hpp"

namespace flsim {

inline EvalReport evaluate_global(const ParameterVector& params, const ArchDescriptor& arch, const Dataset& holdout) {
  if (holdout.empty()) throw ConfigError("global model evaluator: holdout set is empty");
  return evaluate(params, arch, holdout);
}

struct DeployPolicy {
  double min_global_accuracy = 0.0;
  double max_global_loss = std::numeric_limits<double>::infinity();
};

enum class DeployDecision { Deploy, Reject };

struct DeployOutcome {
  DeployDecision decision = DeployDecision::Reject;
  std::vector<std::string> reasons;  // empty on Deploy

  bool deploy() const noexcept { return decision == DeployDecision::Deploy; }
};

inline DeployOutcome decide_deploy(const EvalReport& report, const DeployPolicy& policy) {
  DeployOutcome out;
  if (!(report.accuracy >= policy.min_global_accuracy)) out.reasons.emplace_back("accuracy");
  if (!(report.loss <= policy.max_global_loss)) out.reasons.emplace_back("loss");
  out.decision = out.reasons.empty() ? DeployDecision::Deploy : DeployDecision::Reject;
  return out;
}

struct DeploymentRecord {
  std::string version_id;
  std::uint32_t deployed_at_round = 0;
  std::map<ClientId, std::string> targets;  // client -> model_id
};

/// Per-cluster models for the deployment selector.
struct ClusterModels {
  ClusterAssignment assignment;
  std::map<int, ParameterVector> models;
};

struct Deployment {
  DeploymentRecord record;
  std::map<std::string, ParameterVector> models;  // model_id -> parameters

  const ParameterVector& model_for(ClientId c) const { return models.at(record.targets.at(c)); }
};

inline std::string cluster_model_id(const std::string& version, int cluster) {
  return version + "/c" + std::to_string(cluster);
}

/// Without a selector every target receives `pkg`. With one, each clustered
/// target receives its cluster's model; unclustered targets get `pkg`.
inline Deployment deploy(const ModelPackage& pkg, std::span<const ClientId> targets, const DeployOutcome& decision,
                         std::uint32_t round, const ClusterModels* selector = nullptr) {
  if (!decision.deploy()) throw ValidationError("model deployer: version " + pkg.version_id + " was rejected");
  Deployment d;
  d.record.version_id = pkg.version_id;
  d.record.deployed_at_round = round;
  for (const ClientId c : targets) {
    std::string model_id = pkg.version_id;
    if (selector) {
      const auto it = selector->assignment.assignment.find(c);
      if (it != selector->assignment.assignment.end()) {
        const auto m = selector->models.find(it->second);
        if (it->second < 0 || it->second >= selector->assignment.k || m == selector->models.end())
          throw ValidationError("deployment selector: client " + to_string(c) + " maps to unknown cluster " +
                                std::to_string(it->second));
        model_id = cluster_model_id(pkg.version_id, it->second);
        d.models.emplace(model_id, m->second);
      }
    }
    if (model_id == pkg.version_id) d.models.emplace(model_id, pkg.params);
    d.record.targets.emplace(c, model_id);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Incentive registry
// ---------------------------------------------------------------------------

struct IncentiveEntry {
  std::uint32_t round = 0;
  double contribution_share = 0.0;
  double rate = 0.0;
  double multiplier = 1.0;  // reserved per-client rate column
  double amount = 0.0;
};

struct IncentiveAccount {
  ClientId client_id{};
  double balance = 0.0;
  std::vector<IncentiveEntry> history;
};

using IncentiveLedger = std::map<ClientId, IncentiveAccount>;

struct Contribution {
  ClientId client{};
  std::uint64_t n = 0;
};

/// share_i = n_i / sum n, amount_i = rate * share_i.
inline void accrue_incentive(IncentiveLedger& accounts, std::span<const Contribution> contributors, double rate_per_round,
                             std::uint32_t round) {
  if (!(rate_per_round >= 0.0) || !std::isfinite(rate_per_round))
    throw ConfigError("incentive registry: rate must be non-negative");
  if (contributors.empty()) throw ValidationError("incentive registry: no contributors");
  double total = 0.0;
  for (const auto& c : contributors) total += static_cast<double>(c.n);
  if (!(total > 0.0)) throw ValidationError("incentive registry: contributors have no samples");
  for (const auto& c : contributors) {
    auto& acct = accounts[c.client];
    acct.client_id = c.client;
    IncentiveEntry e;
    e.round = round;
    e.contribution_share = static_cast<double>(c.n) / total;
    e.rate = rate_per_round;
    e.amount = rate_per_round * e.contribution_share * e.multiplier;
    acct.balance += e.amount;
    acct.history.push_back(e);
  }
}

// ---------------------------------------------------------------------------
// Model monitor and replacement trigger
// ---------------------------------------------------------------------------

enum class MonitorAction { None, FineTune, NewJob };

inline const char* to_string(MonitorAction a) {
  switch (a) {
    case MonitorAction::None: return "none";
    case MonitorAction::FineTune: return "fine_tune";
    case MonitorAction::NewJob: return "new_job";
  }
  return "?";
}

struct MonitorState {
  std::size_t window_size = 5;
  std::deque<double> window;
  double threshold = 0.8;
  int cooldown_rounds = 5;
  double band = 0.1;  // FineTune when the mean is within `band` below threshold
  std::optional<int> last_trigger_round;

  double mean() const {
    double s = 0.0;
    for (const double v : window) s += v;
    return window.empty() ? 0.0 : s / static_cast<double>(window.size());
  }
};

inline std::pair<MonitorState, MonitorAction> monitor_observe(MonitorState state, int round, double deployed_accuracy) {
  if (state.window_size == 0) throw ConfigError("model monitor: window must be positive");
  state.window.push_back(deployed_accuracy);
  while (state.window.size() > state.window_size) state.window.pop_front();
  MonitorAction action = MonitorAction::None;
  const bool cooled = !state.last_trigger_round || round - *state.last_trigger_round > state.cooldown_rounds;
  if (state.window.size() == state.window_size && cooled) {
    const double m = state.mean();
    if (m < state.threshold) {
      action = m >= state.threshold - state.band ? MonitorAction::FineTune : MonitorAction::NewJob;
      state.last_trigger_round = round;
    }
  }
  return {std::move(state), action};
}

}  // namespace flsim
