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

// JSON / JSONL encodings for run artifacts.

#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "flsim/common.hpp"
#include "flsim/data.hpp"
#include "flsim/deployment.hpp"
#include "flsim/ledger.hpp"
#include "flsim/model.hpp"
#include "flsim/server.hpp"
#include "flsim/simulation.hpp"

namespace flsim {

/// Non-finite numbers have no JSON literal; they are written as strings.
inline json number(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

inline double number(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  throw CorruptionError("artifact: expected a number, got " + j.dump());
}

inline json to_json(const EvalReport& r) {
  return {{"loss", number(r.loss)},
          {"accuracy", number(r.accuracy)},
          {"n_samples", r.n_samples},
          {"per_class_counts", r.per_class_counts},
          {"degenerate", r.degenerate}};
}

inline EvalReport eval_from_json(const json& j) {
  EvalReport r;
  r.loss = number(j.at("loss"));
  r.accuracy = number(j.at("accuracy"));
  r.n_samples = j.at("n_samples").get<decltype(r.n_samples)>();
  r.per_class_counts = j.at("per_class_counts").get<decltype(r.per_class_counts)>();
  r.degenerate = j.at("degenerate").get<bool>();
  return r;
}

inline json to_json(const GlobalVersionRecord& r) {
  json contributors = json::array();
  for (const auto& c : r.contributors) {
    json cj{{"client_id", to_u32(c.client_id)},
            {"local_params_hash", hex64(c.local_params_hash)},
            {"n_samples", c.n_samples},
            {"local_eval", to_json(c.local_eval)},
            {"base_version_id", c.base_version_id},
            {"encoding", c.encoding},
            {"bits", c.bits}};
    cj["edge_id"] = c.edge_id ? json(*c.edge_id) : json(nullptr);
    contributors.push_back(std::move(cj));
  }
  return {{"version_id", r.version_id},
          {"parent_version_id", r.parent_version_id.empty() ? json(nullptr) : json(r.parent_version_id)},
          {"params_hash", hex64(r.params_hash)},
          {"contributors", contributors},
          {"created_at_round", r.created_at_round},
          {"aggregation_mode", r.aggregation_mode},
          {"param_count", r.param_count},
          {"shared_len", r.shared_len},
          {"alpha", r.alpha},
          {"staleness", r.staleness}};
}

inline GlobalVersionRecord version_from_json(const json& j) {
  try {
    GlobalVersionRecord r;
    r.version_id = j.at("version_id").get<std::string>();
    if (!j.at("parent_version_id").is_null()) r.parent_version_id = j.at("parent_version_id").get<std::string>();
    r.params_hash = parse_hex64(j.at("params_hash").get<std::string>());
    for (const auto& cj : j.at("contributors")) {
      ContributorRecord c;
      c.client_id = ClientId{cj.at("client_id").get<std::uint32_t>()};
      c.local_params_hash = parse_hex64(cj.at("local_params_hash").get<std::string>());
      c.n_samples = cj.at("n_samples").get<std::uint64_t>();
      c.local_eval = eval_from_json(cj.at("local_eval"));
      c.base_version_id = cj.at("base_version_id").get<std::string>();
      c.encoding = cj.at("encoding").get<std::string>();
      c.bits = cj.at("bits").get<int>();
      if (!cj.at("edge_id").is_null()) c.edge_id = cj.at("edge_id").get<std::uint32_t>();
      r.contributors.push_back(std::move(c));
    }
    r.created_at_round = j.at("created_at_round").get<std::uint32_t>();
    r.aggregation_mode = j.at("aggregation_mode").get<std::string>();
    r.param_count = j.at("param_count").get<std::size_t>();
    r.shared_len = j.at("shared_len").get<std::size_t>();
    r.alpha = j.at("alpha").get<double>();
    r.staleness = j.at("staleness").get<std::uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("ledger: malformed record: ") + e.what());
  }
}

inline json to_json(const ClientRecord& r) {
  return {{"client_id", to_u32(r.client_id)},
          {"resource_score", r.resource_score},
          {"rounds_participated", r.rounds_participated},
          {"last_local_eval", r.last_local_eval ? to_json(*r.last_local_eval) : json(nullptr)},
          {"registered_at", r.registered_at},
          {"status", to_string(r.status)},
          {"num_samples", r.num_samples}};
}

inline json to_json(const DeploymentRecord& r) {
  json targets = json::object();
  for (const auto& [c, id] : r.targets) targets[std::to_string(to_u32(c))] = id;
  return {{"version_id", r.version_id}, {"deployed_at_round", r.deployed_at_round}, {"targets", targets}};
}

inline json to_json(const RoundMetrics& m) {
  return {{"round", m.round},
          {"version_id", m.version_id},
          {"global_acc", number(m.global_acc)},
          {"global_loss", number(m.global_loss)},
          {"n_selected", m.n_selected},
          {"n_received", m.n_received},
          {"bytes_up", m.bytes_up},
          {"bytes_down", m.bytes_down},
          {"triggers", m.triggers}};
}

inline RoundMetrics metrics_from_json(const json& j) {
  try {
    RoundMetrics m;
    m.round = j.at("round").get<std::uint32_t>();
    m.version_id = j.at("version_id").get<std::string>();
    m.global_acc = number(j.at("global_acc"));
    m.global_loss = number(j.at("global_loss"));
    m.n_selected = j.at("n_selected").get<std::size_t>();
    m.n_received = j.at("n_received").get<std::size_t>();
    m.bytes_up = j.at("bytes_up").get<std::uint64_t>();
    m.bytes_down = j.at("bytes_down").get<std::uint64_t>();
    m.triggers = j.at("triggers").get<std::vector<std::string>>();
    return m;
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("metrics: malformed record: ") + e.what());
  }
}

inline json to_json(const MonitorRecord& m) {
  return {{"round", m.round},
          {"deployed_acc", m.deployed_acc},
          {"window_mean", m.window_mean},
          {"action", to_string(m.action)}};
}

inline json to_json(const ArchDescriptor& a) {
  return {{"kind", a.kind == ModelKind::mlp ? "mlp" : "logistic"},
          {"input_dim", a.input_dim},
          {"hidden_dim", a.hidden_dim},
          {"num_classes", a.num_classes}};
}

inline ArchDescriptor arch_from_json(const json& j) {
  ArchDescriptor a;
  a.kind = j.at("kind").get<std::string>() == "mlp" ? ModelKind::mlp : ModelKind::logistic;
  a.input_dim = j.at("input_dim").get<int>();
  a.hidden_dim = j.at("hidden_dim").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.validate();
  return a;
}

inline json checkpoint_json(const std::string& version, const ArchDescriptor& arch, const ParameterVector& p) {
  return {{"version_id", version}, {"arch", to_json(arch)}, {"values", p.vec()}, {"params_hash", hex64(params_hash(p))}};
}

inline std::pair<ArchDescriptor, ParameterVector> load_checkpoint(const json& j) {
  try {
    ArchDescriptor arch = arch_from_json(j.at("arch"));
    ParameterVector p(j.at("values").get<std::vector<double>>());
    if (p.size() != arch.parameter_count()) throw ShapeError("checkpoint: params do not match arch");
    if (hex64(params_hash(p)) != j.at("params_hash").get<std::string>())
      throw IntegrityError("checkpoint: params hash mismatch");
    return {arch, std::move(p)};
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint: malformed: ") + e.what());
  }
}

/// One line per sample: {client_id, split, features, label}.
inline std::vector<json> shard_jsonl(const ClientShard& s) {
  std::vector<json> lines;
  auto emit = [&](const Dataset& d, const char* split) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto row = d.row(i);
      lines.push_back({{"client_id", to_u32(s.client_id)},
                       {"split", split},
                       {"features", std::vector<double>(row.begin(), row.end())},
                       {"label", d.label(i)}});
    }
  };
  emit(s.train, "train");
  emit(s.test, "test");
  return lines;
}

// ---------------------------------------------------------------------------
// JSONL files
// ---------------------------------------------------------------------------

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path + "'");
}

inline void write_jsonl(const std::string& path, const std::vector<json>& lines) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  write_text(path, text);
}

inline std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<json> lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      lines.push_back(json::parse(line));
    } catch (const json::parse_error&) {
      throw CorruptionError("'" + path + "' line " + std::to_string(n) + " is not valid JSON");
    }
  }
  return lines;
}

inline std::vector<json> ledger_jsonl(const CoVersionLedger& ledger) {
  std::vector<json> lines;
  for (const auto& r : ledger.records()) lines.push_back(to_json(r));
  return lines;
}

inline std::vector<GlobalVersionRecord> load_ledger(const std::string& path) {
  std::vector<GlobalVersionRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(version_from_json(j));
  return out;
}

inline std::vector<json> archive_jsonl(const PayloadArchive& archive) {
  std::vector<json> lines;
  for (const auto& [h, bytes] : archive.entries()) lines.push_back({{"hash", hex64(h)}, {"bytes", to_hex(bytes)}});
  return lines;
}

inline PayloadArchive load_archive(const std::string& path) {
  PayloadArchive archive;
  for (const auto& j : read_jsonl(path)) {
    try {
      archive.put_raw(parse_hex64(j.at("hash").get<std::string>()), from_hex(j.at("bytes").get<std::string>()));
    } catch (const json::exception& e) {
      throw CorruptionError(std::string("archive: malformed entry: ") + e.what());
    }
  }
  return archive;
}

inline std::vector<json> registry_jsonl(const ClientRegistry& registry) {
  std::vector<json> lines;
  for (const auto& [id, r] : registry.records()) lines.push_back(to_json(r));
  return lines;
}

inline std::vector<json> incentives_jsonl(const IncentiveLedger& accounts) {
  std::vector<json> lines;
  for (const auto& [c, acct] : accounts) {
    double balance = 0.0;
    for (const auto& e : acct.history) {
      balance += e.amount;
      lines.push_back({{"client_id", to_u32(c)},
                       {"round", e.round},
                       {"contribution_share", e.contribution_share},
                       {"rate", e.rate},
                       {"multiplier", e.multiplier},
                       {"amount", e.amount},
                       {"balance", balance}});
    }
  }
  return lines;
}

}  // namespace flsim
