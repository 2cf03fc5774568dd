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

// Model co-versioning: an append-only lineage of global versions with the
// local contributions that produced each one, a content-addressed payload
// archive, and replay verification.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flsim/aggregation.hpp"
#include "flsim/common.hpp"
#include "flsim/compression.hpp"
#include "flsim/model.hpp"
#include "flsim/net.hpp"
#include "flsim/wire.hpp"

namespace flsim {

/// FNV-1a of the canonical encoding of a global model (a broadcast message
/// with round 0 and the server as sender).
inline Bytes canonical_global_encoding(const ParameterVector& p) {
  return encode_dense(MessageKind::broadcast, 0, kServerNode, p.values());
}

inline std::uint64_t params_hash(const ParameterVector& p) { return fnv1a64(canonical_global_encoding(p)); }

struct ContributorRecord {
  ClientId client_id{};
  std::uint64_t local_params_hash = 0;  // FNV-1a of the archived payload message
  std::uint64_t n_samples = 0;
  EvalReport local_eval;
  std::string base_version_id;
  std::string encoding = "dense";  // dense | compressed | masked
  int bits = 0;                    // compressed only
  std::optional<std::uint32_t> edge_id;
};

struct GlobalVersionRecord {
  std::string version_id;
  std::string parent_version_id;  // empty for g0
  std::uint64_t params_hash = 0;
  std::vector<ContributorRecord> contributors;
  std::uint32_t created_at_round = 0;
  std::string aggregation_mode;
  std::size_t param_count = 0;
  std::size_t shared_len = 0;  // leading parameters produced by aggregation
  double alpha = 1.0;          // async mixing weight actually applied
  std::uint64_t staleness = 0;
};

class CoVersionLedger {
 public:
  void record(GlobalVersionRecord rec) {
    if (index_.count(rec.version_id)) throw IntegrityError("co-versioning registry: duplicate version " + rec.version_id);
    if (rec.parent_version_id.empty()) {
      if (!records_.empty()) throw IntegrityError("co-versioning registry: only the first version may lack a parent");
    } else {
      if (!index_.count(rec.parent_version_id))
        throw IntegrityError("co-versioning registry: unknown parent " + rec.parent_version_id + " for " + rec.version_id);
      if (rec.contributors.empty())
        throw IntegrityError("co-versioning registry: version " + rec.version_id + " has no contributors");
    }
    index_.emplace(rec.version_id, records_.size());
    records_.push_back(std::move(rec));
  }

  const GlobalVersionRecord* find(const std::string& id) const {
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  /// Parent chain from `version_id` back to the root, inclusive.
  std::vector<std::string> lineage(const std::string& version_id) const {
    std::vector<std::string> path;
    const GlobalVersionRecord* r = find(version_id);
    if (!r) throw IntegrityError("co-versioning registry: unknown version " + version_id);
    while (r) {
      path.push_back(r->version_id);
      r = r->parent_version_id.empty() ? nullptr : find(r->parent_version_id);
    }
    return path;
  }

  const std::vector<GlobalVersionRecord>& records() const noexcept { return records_; }
  bool empty() const noexcept { return records_.empty(); }
  const GlobalVersionRecord& latest() const { return records_.back(); }

 private:
  std::vector<GlobalVersionRecord> records_;
  std::map<std::string, std::size_t> index_;
};

/// Content-addressed store of payload messages keyed by their FNV-1a hash.
class PayloadArchive {
 public:
  std::uint64_t put(Bytes bytes) {
    const std::uint64_t h = fnv1a64(bytes);
    entries_.emplace(h, std::move(bytes));
    return h;
  }

  /// Inserts under an explicit key (used when loading an archive from disk;
  /// the key is re-verified at replay time).
  void put_raw(std::uint64_t key, Bytes bytes) { entries_[key] = std::move(bytes); }

  const Bytes* get(std::uint64_t h) const {
    const auto it = entries_.find(h);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::uint64_t, Bytes>& entries() const noexcept { return entries_; }

 private:
  std::map<std::uint64_t, Bytes> entries_;
};

/// Copy of `parent` with its leading segment replaced by `shared`.
inline ParameterVector splice_shared(const ParameterVector& parent, const ParameterVector& shared) {
  if (shared.size() > parent.size()) throw ShapeError("shared segment longer than the model");
  std::vector<double> out = parent.vec();
  std::copy(shared.values().begin(), shared.values().end(), out.begin());
  return ParameterVector(std::move(out));
}

inline ParameterVector leading(const ParameterVector& p, std::size_t n) {
  return ParameterVector(std::vector<double>(p.values().begin(), p.values().begin() + static_cast<std::ptrdiff_t>(n)));
}

enum class ReplayStatus { match, mismatch, tainted };

inline const char* to_string(ReplayStatus s) {
  switch (s) {
    case ReplayStatus::match: return "match";
    case ReplayStatus::mismatch: return "mismatch";
    case ReplayStatus::tainted: return "tainted";
  }
  return "?";
}

struct ReplayEntry {
  std::string version_id;
  ReplayStatus status = ReplayStatus::match;
  std::string detail;
};

struct ReplayReport {
  std::vector<ReplayEntry> entries;

  std::size_t matched() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [](const ReplayEntry& e) { return e.status == ReplayStatus::match; }));
  }
  bool all_match() const { return matched() == entries.size(); }
};

/// Recomputes every global version from archived payloads through its
/// recorded aggregation mode. A version whose own payloads or recomputation
/// disagree with the recorded hashes is a mismatch; a version whose inputs
/// (parent, or base of a compressed delta) did not match is tainted.
inline ReplayReport replay(const std::vector<GlobalVersionRecord>& records, const PayloadArchive& archive) {
  std::vector<std::string> missing;
  for (const auto& r : records) {
    if (r.parent_version_id.empty() && !archive.get(r.params_hash)) missing.push_back(hex64(r.params_hash));
    for (const auto& c : r.contributors) {
      if (!archive.get(c.local_params_hash)) missing.push_back(hex64(c.local_params_hash));
    }
  }
  if (!missing.empty()) {
    std::string msg = "replay: incomplete archive, missing payloads:";
    for (const auto& h : missing) msg += " " + h;
    throw IntegrityError(msg);
  }

  ReplayReport report;
  std::map<std::string, ParameterVector> params;
  std::map<std::string, bool> good;

  for (const auto& rec : records) {
    ReplayEntry entry{rec.version_id, ReplayStatus::match, ""};
    std::optional<ParameterVector> result;
    bool payloads_ok = true;
    try {
      if (rec.parent_version_id.empty()) {
        const Bytes& bytes = *archive.get(rec.params_hash);
        payloads_ok = fnv1a64(bytes) == rec.params_hash;
        result = ParameterVector(decode_payload(bytes).dense);
      } else {
        const auto pit = params.find(rec.parent_version_id);
        if (pit == params.end()) throw IntegrityError("parent " + rec.parent_version_id + " could not be recomputed");
        const ParameterVector& parent = pit->second;

        std::vector<WeightedUpdate> updates;
        std::vector<MaskedUpdate> masked;
        std::vector<ClientId> cohort;
        std::map<std::uint32_t, std::vector<ClientId>> edges;
        for (const auto& c : rec.contributors) {
          const Bytes& bytes = *archive.get(c.local_params_hash);
          if (fnv1a64(bytes) != c.local_params_hash) {
            payloads_ok = false;
            entry.detail += "payload of client " + to_string(c.client_id) + " does not match its hash; ";
          }
          const auto decoded = decode_payload(bytes, static_cast<std::uint32_t>(rec.shared_len), c.bits ? c.bits : 8);
          cohort.push_back(c.client_id);
          if (c.edge_id) edges[*c.edge_id].push_back(c.client_id);
          if (c.encoding == "masked") {
            masked.push_back(MaskedUpdate{c.client_id, decoded.masked, c.n_samples});
          } else if (c.encoding == "compressed") {
            const auto bit = params.find(c.base_version_id);
            if (bit == params.end()) throw IntegrityError("base " + c.base_version_id + " unavailable");
            const ParameterVector delta = decompress(decoded.compressed);
            std::vector<double> v(delta.size());
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = bit->second[j] + delta[j];
            updates.push_back({c.client_id, ParameterVector(std::move(v)), c.n_samples});
          } else {
            updates.push_back({c.client_id, ParameterVector(decoded.dense), c.n_samples});
          }
        }

        ParameterVector shared;
        if (rec.aggregation_mode == "secure") {
          shared = unmask_sum(masked, cohort);
        } else if (rec.aggregation_mode == "hierarchical") {
          std::vector<EdgeGroup> groups;
          for (auto& [id, members] : edges) groups.push_back({id, members});
          shared = hierarchical_aggregate(groups, updates);
        } else if (rec.aggregation_mode == "async") {
          if (updates.size() != 1) throw IntegrityError("async version must have exactly one contributor");
          shared = blend(leading(parent, rec.shared_len), updates.front().params, rec.alpha);
        } else if (rec.aggregation_mode == "fedavg" || rec.aggregation_mode == "decentralised") {
          shared = fedavg(updates);
        } else {
          throw IntegrityError("unknown aggregation mode '" + rec.aggregation_mode + "'");
        }
        result = splice_shared(parent, shared);
      }
    } catch (const Error& e) {
      entry.status = ReplayStatus::mismatch;
      entry.detail += e.what();
    }

    // Inputs recomputed from a non-matching version cannot be checked, so
    // such a version is tainted unless its own payloads fail verification.
    bool inputs_good = rec.parent_version_id.empty() || good[rec.parent_version_id];
    for (const auto& c : rec.contributors) {
      if (c.encoding == "compressed" && !good[c.base_version_id]) inputs_good = false;
    }
    if (result) {
      const std::uint64_t h = params_hash(*result);
      if (!payloads_ok) {
        entry.status = ReplayStatus::mismatch;
      } else if (!inputs_good) {
        entry.status = ReplayStatus::tainted;
        entry.detail = "descends from a non-matching version";
      } else if (h != rec.params_hash) {
        entry.status = ReplayStatus::mismatch;
        entry.detail += "recomputed " + hex64(h) + ", recorded " + hex64(rec.params_hash);
      }
      params.insert_or_assign(rec.version_id, *result);
    } else if (payloads_ok && !inputs_good) {
      entry.status = ReplayStatus::tainted;
      entry.detail = "descends from a non-matching version";
    }
    good[rec.version_id] = entry.status == ReplayStatus::match;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace flsim
