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

// Client-side pipeline: receive a package, train (optionally with a private
// multi-task head), evaluate locally, gate, compress or mask, upload.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "flsim/aggregation.hpp"
#include "flsim/common.hpp"
#include "flsim/compression.hpp"
#include "flsim/data.hpp"
#include "flsim/model.hpp"
#include "flsim/wire.hpp"

namespace flsim {

struct ModelPackage {
  std::string version_id;
  ParameterVector params;
  Hyperparameters hp;
  ArchDescriptor arch;

  void validate() const {
    arch.validate();
    hp.validate();
    if (params.size() != arch.parameter_count()) throw ShapeError("model package: params do not match arch");
  }
};

struct GatePolicy {
  double min_accuracy = 0.0;
  double max_loss = std::numeric_limits<double>::infinity();
};

/// Inclusive on both bounds. A non-finite loss never passes.
inline bool upload_gate(const EvalReport& report, const GatePolicy& policy) {
  if (std::isnan(report.loss) || std::isnan(report.accuracy)) return false;
  if (std::isinf(report.loss)) return false;
  return report.accuracy >= policy.min_accuracy && report.loss <= policy.max_loss;
}

using UpdatePayload = std::variant<ParameterVector, CompressedUpdate, MaskedUpdate>;

struct UpdateEnvelope {
  ClientId client_id{};
  std::uint32_t round = 0;
  std::string base_version_id;
  std::uint64_t n_samples = 0;
  UpdatePayload payload;
  bool is_delta = false;     // compressed payloads carry (local - broadcast)
  std::size_t shared_len = 0;  // parameters covered by the payload
  EvalReport local_eval;
  std::uint64_t bytes = 0;
};

inline const char* payload_encoding(const UpdatePayload& p) {
  switch (p.index()) {
    case 0: return "dense";
    case 1: return "compressed";
    default: return "masked";
  }
}

/// Header + payload in the canonical encoding (no eval report). This is the
/// unit that gets hashed and archived for lineage replay.
inline Bytes payload_message(const UpdateEnvelope& env) {
  const std::uint32_t sender = to_u32(env.client_id);
  if (const auto* dense = std::get_if<ParameterVector>(&env.payload))
    return encode_dense(MessageKind::dense_update, env.round, sender, dense->values());
  if (const auto* cu = std::get_if<CompressedUpdate>(&env.payload)) return encode_compressed(env.round, sender, *cu);
  return encode_masked(env.round, sender, std::get<MaskedUpdate>(env.payload).words);
}

/// Full upload wire image: header, eval report, payload.
inline Bytes serialize(const UpdateEnvelope& env) {
  const Bytes msg = payload_message(env);
  ByteWriter report;
  write_eval_report(report, env.local_eval);
  const Bytes& rep = report.bytes();
  Bytes out(msg.size() + rep.size());
  std::copy_n(msg.data(), kHeaderBytes, out.data());
  std::copy_n(rep.data(), rep.size(), out.data() + kHeaderBytes);
  std::copy_n(msg.data() + kHeaderBytes, msg.size() - kHeaderBytes, out.data() + kHeaderBytes + rep.size());
  return out;
}

enum class WithholdReason { divergence, below_threshold };

inline const char* to_string(WithholdReason r) {
  return r == WithholdReason::divergence ? "divergence" : "below-threshold";
}

struct Withheld {
  ClientId client_id{};
  WithholdReason reason = WithholdReason::below_threshold;
  std::string detail;
};

/// Client-resident multi-task state. The head never leaves the client.
struct PersonalState {
  std::size_t shared_len = 0;
  std::optional<ParameterVector> private_head;
};

struct SecureContext {
  std::vector<ClientId> cohort;
  std::uint64_t round_seed = 0;
};

struct ClientOptions {
  GatePolicy gate;
  std::optional<CompressionSpec> compression;
  bool multitask = false;
  std::optional<SecureContext> secure;
  std::uint32_t round = 0;
};

struct BroadcastResult {
  std::variant<UpdateEnvelope, Withheld> outcome;
  std::optional<ParameterVector> local_model;  // client-resident trained model
  std::optional<PersonalState> state;          // updated personal state (multitask)

  bool uploaded() const noexcept { return std::holds_alternative<UpdateEnvelope>(outcome); }
};

struct MultitaskResult {
  ParameterVector shared;       // body segment, uploaded
  ParameterVector full_model;   // body + private head, client-resident
  PersonalState state;
};

/// Joint local training of the shared body and the private head. Only the
/// body is returned for upload; the head persists in the returned state.
inline MultitaskResult personalize_multitask(const ModelPackage& pkg, const PersonalState& state, const Dataset& shard,
                                             const Hyperparameters& hp) {
  if (pkg.arch.kind != ModelKind::mlp)
    throw UnsupportedError("multi-task model trainer: logistic arch has no body/head split");
  const std::size_t body = pkg.arch.body_count();
  if (state.shared_len != 0 && state.shared_len != body)
    throw ShapeError("multi-task model trainer: shared_len does not match arch body");
  const auto p = pkg.params.values();
  std::vector<double> w(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(body));
  if (state.private_head) {
    const auto h = state.private_head->values();
    if (h.size() != p.size() - body) throw ShapeError("multi-task model trainer: head size mismatch");
    w.insert(w.end(), h.begin(), h.end());
  } else {
    w.insert(w.end(), p.begin() + static_cast<std::ptrdiff_t>(body), p.end());
  }
  const ParameterVector trained = local_train(ParameterVector(std::move(w)), pkg.arch, shard, hp);
  const auto t = trained.values();
  MultitaskResult r{ParameterVector(std::vector<double>(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(body))),
                    trained,
                    PersonalState{body, ParameterVector(std::vector<double>(t.begin() + static_cast<std::ptrdiff_t>(body), t.end()))}};
  return r;
}

/// local_train -> local evaluate -> upload gate -> compress / mask.
inline BroadcastResult handle_broadcast(const ModelPackage& pkg, const ClientShard& shard, const ClientOptions& opts,
                                        const PersonalState* state = nullptr) {
  pkg.validate();
  BroadcastResult result;
  ParameterVector local;
  std::vector<double> upload;
  std::size_t offset_len = pkg.params.size();
  try {
    if (opts.multitask) {
      const PersonalState empty{pkg.arch.body_count(), std::nullopt};
      auto mt = personalize_multitask(pkg, state ? *state : empty, shard.train, pkg.hp);
      upload = mt.shared.vec();
      offset_len = upload.size();
      local = std::move(mt.full_model);
      result.state = std::move(mt.state);
    } else {
      local = local_train(pkg.params, pkg.arch, shard.train, pkg.hp);
      upload = local.vec();
    }
  } catch (const DivergenceError& e) {
    result.outcome = Withheld{shard.client_id, WithholdReason::divergence, e.what()};
    return result;
  }
  result.local_model = local;

  const EvalReport report = evaluate(local, pkg.arch, shard.test);
  if (!upload_gate(report, opts.gate)) {
    result.outcome = Withheld{shard.client_id, WithholdReason::below_threshold,
                              "local accuracy " + std::to_string(report.accuracy) + ", loss " + std::to_string(report.loss)};
    return result;
  }

  UpdateEnvelope env;
  env.client_id = shard.client_id;
  env.round = opts.round;
  env.base_version_id = pkg.version_id;
  env.n_samples = shard.train.size();
  env.local_eval = report;
  env.shared_len = offset_len;
  if (opts.secure) {
    const WeightedUpdate wu{shard.client_id, ParameterVector(upload), env.n_samples};
    env.payload = mask_update(wu, opts.secure->cohort, opts.secure->round_seed);
  } else if (opts.compression && !opts.compression->is_passthrough()) {
    std::vector<double> delta(upload.size());
    for (std::size_t j = 0; j < delta.size(); ++j) delta[j] = upload[j] - pkg.params[j];
    env.payload = compress(delta, *opts.compression);
    env.is_delta = true;
  } else {
    env.payload = ParameterVector(std::move(upload));
  }
  env.bytes = serialize(env).size();
  result.outcome = std::move(env);
  return result;
}

/// Server-side reconstruction of the uploaded parameter segment. Compressed
/// deltas are added back onto the base the client trained from.
inline ParameterVector reconstruct_update(const UpdateEnvelope& env, const ParameterVector& base) {
  if (const auto* dense = std::get_if<ParameterVector>(&env.payload)) return *dense;
  if (const auto* cu = std::get_if<CompressedUpdate>(&env.payload)) {
    const ParameterVector delta = decompress(*cu);
    if (delta.size() > base.size()) throw ShapeError("compressed update larger than base model");
    std::vector<double> out(delta.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = base[j] + delta[j];
    return ParameterVector(std::move(out));
  }
  throw UnsupportedError("masked updates can only be aggregated as a cohort");
}

}  // namespace flsim
