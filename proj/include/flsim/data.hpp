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

// Simulated on-device data collection, client-local preprocessing, non-IID
// partitioning and the jittered-oversampling heterogeneous data handler.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flsim/common.hpp"
#include "flsim/model.hpp"

namespace flsim {

struct SyntheticSpec {
  int num_classes = 3;
  int input_dim = 8;
  double class_mean_scale = 4.0;
  double noise_sigma = 1.0;
  int samples_per_client = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ValidationError("synthetic: num_classes must be >= 2");
    if (input_dim < 1) throw ValidationError("synthetic: input_dim must be positive");
    if (!(class_mean_scale > 0.0)) throw ValidationError("synthetic: class_mean_scale must be positive");
    if (!(noise_sigma > 0.0)) throw ValidationError("synthetic: noise_sigma must be positive");
    if (samples_per_client < 1) throw ValidationError("synthetic: samples_per_client must be positive");
  }
};

enum class PartitionMode { iid, dirichlet_label_skew, quantity_skew, clustered_label_skew };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::iid;
  double alpha = 0.5;   // dirichlet_label_skew
  double sigma = 0.5;   // quantity_skew
  int n_groups = 2;     // clustered_label_skew
  double leak = 0.05;   // clustered_label_skew: mass spread over other groups' classes
  std::uint64_t seed = 0;
};

struct NormalizerStats {
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<bool> passthrough;  // zero-variance columns left unscaled

  Dataset apply(const Dataset& raw) const {
    Dataset out(raw.dim(), raw.num_classes());
    std::vector<double> row(static_cast<std::size_t>(raw.dim()));
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const auto x = raw.row(i);
      for (std::size_t j = 0; j < row.size(); ++j)
        row[j] = passthrough[j] ? x[j] : (x[j] - means[j]) / stds[j];
      out.add(row, raw.label(i));
    }
    return out;
  }
};

struct Preprocessed {
  Dataset data;
  NormalizerStats stats;
};

struct ClientShard {
  ClientId client_id{};
  Dataset train;
  Dataset test;
  std::vector<int> label_histogram;  // of train
  std::vector<double> class_weights;  // generating distribution (simulation-side)
  NormalizerStats stats;
};

/// Class means: seeded Gaussian directions scaled to `class_mean_scale`.
/// When num_classes <= input_dim the directions are orthogonalised, so every
/// pair of means is scale * sqrt(2) apart.
inline std::vector<std::vector<double>> class_means(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 0x6d65616eULL));
  const bool orthogonal = spec.num_classes <= spec.input_dim;
  std::vector<std::vector<double>> means;
  while (means.size() < static_cast<std::size_t>(spec.num_classes)) {
    std::vector<double> m(static_cast<std::size_t>(spec.input_dim));
    for (double& v : m) v = rng.normal();
    if (orthogonal) {
      for (const auto& u : means) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m.size(); ++j) dot += m[j] * u[j];
        for (std::size_t j = 0; j < m.size(); ++j) m[j] -= dot * u[j] / (spec.class_mean_scale * spec.class_mean_scale);
      }
    }
    double norm = 0.0;
    for (const double v : m) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm > 1e-9)) continue;
    for (double& v : m) v = spec.class_mean_scale * v / norm;
    means.push_back(std::move(m));
  }
  return means;
}

namespace detail {

inline void check_probability_vector(std::span<const double> w, std::size_t k, const char* what) {
  if (w.size() != k) throw ValidationError(std::string(what) + ": expected " + std::to_string(k) + " entries");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!(w[i] >= 0.0)) throw ValidationError(std::string(what) + ": entry " + std::to_string(i) + " is negative");
    s += w[i];
  }
  if (std::abs(s - 1.0) > 1e-9) throw ValidationError(std::string(what) + ": weights must sum to 1");
}

inline int draw_categorical(Rng& rng, std::span<const double> w) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last_positive = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k] > 0.0) last_positive = static_cast<int>(k);
    acc += w[k];
    if (u < acc && w[k] > 0.0) return static_cast<int>(k);
  }
  return last_positive;  // rounding slack at the top of the range
}

}  // namespace detail

/// Draws `n_samples` points for one client: label ~ class_weights, feature =
/// class mean + N(0, noise_sigma^2) per coordinate.
inline Dataset collect(const SyntheticSpec& spec, ClientId client, std::span<const double> class_weights,
                       int n_samples) {
  spec.validate();
  detail::check_probability_vector(class_weights, static_cast<std::size_t>(spec.num_classes), "data collector");
  const auto means = class_means(spec);
  Rng rng(mix_seed(spec.seed, 0x636f6c6cULL, to_u32(client)));
  Dataset out(spec.input_dim, spec.num_classes);
  std::vector<double> x(static_cast<std::size_t>(spec.input_dim));
  for (int i = 0; i < n_samples; ++i) {
    const int y = detail::draw_categorical(rng, class_weights);
    const auto& m = means[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = m[j] + spec.noise_sigma * rng.normal();
    out.add(x, y);
  }
  return out;
}

inline Dataset collect(const SyntheticSpec& spec, ClientId client, std::span<const double> class_weights) {
  return collect(spec, client, class_weights, spec.samples_per_client);
}

/// Per-feature z-score from the dataset's own statistics.
inline Preprocessed preprocess(const Dataset& raw) {
  if (raw.empty()) throw EmptyInputError("data preprocessor: empty input");
  const auto f = static_cast<std::size_t>(raw.dim());
  const auto n = static_cast<double>(raw.size());
  NormalizerStats st;
  st.means.assign(f, 0.0);
  st.stds.assign(f, 0.0);
  st.passthrough.assign(f, false);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto x = raw.row(i);
    for (std::size_t j = 0; j < f; ++j) st.means[j] += x[j];
  }
  for (double& m : st.means) m /= n;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto x = raw.row(i);
    for (std::size_t j = 0; j < f; ++j) {
      const double d = x[j] - st.means[j];
      st.stds[j] += d * d;
    }
  }
  for (std::size_t j = 0; j < f; ++j) {
    st.stds[j] = std::sqrt(st.stds[j] / n);
    // A constant column leaves only rounding residue in the variance.
    if (st.stds[j] <= 1e-12 * std::max(1.0, std::abs(st.means[j]))) st.passthrough[j] = true;
  }
  return {st.apply(raw), std::move(st)};
}

inline std::vector<double> uniform_weights(int k) {
  return std::vector<double>(static_cast<std::size_t>(k), 1.0 / k);
}

inline std::vector<double> dirichlet(Rng& rng, int k, double alpha) {
  std::vector<double> w(static_cast<std::size_t>(k));
  double s = 0.0;
  for (double& v : w) {
    v = rng.gamma(alpha);
    s += v;
  }
  if (s <= 0.0) {
    // Every gamma draw underflowed: put all mass on one class.
    std::fill(w.begin(), w.end(), 0.0);
    w[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(k)))] = 1.0;
    return w;
  }
  for (double& v : w) v /= s;
  return w;
}

/// Turns one client's raw sample into a shard: seeded 80/20 split, then
/// z-scoring with statistics fitted on the client's own training rows.
inline ClientShard build_shard(ClientId client, const Dataset& raw, std::vector<double> class_weights,
                               std::uint64_t seed) {
  if (raw.size() < 2) throw EmptyInputError("shard needs at least 2 samples");
  auto order = detail::iota_indices(raw.size());
  Rng rng(mix_seed(seed, 0x73706c74ULL, to_u32(client)));
  rng.shuffle(order);
  const std::size_t n_test = std::max<std::size_t>(1, raw.size() / 5);
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  auto pre = preprocess(raw.subset(train_idx));
  ClientShard shard;
  shard.client_id = client;
  shard.test = pre.stats.apply(raw.subset(test_idx));
  shard.train = std::move(pre.data);
  shard.stats = std::move(pre.stats);
  shard.label_histogram = shard.train.label_histogram();
  shard.class_weights = std::move(class_weights);
  return shard;
}

/// Generating class weights and sample count for one client.
struct ClientDraw {
  std::vector<double> class_weights;
  int n_samples = 0;
};

inline ClientDraw client_draw(const PartitionSpec& spec, const SyntheticSpec& synth, ClientId client) {
  const int k = synth.num_classes;
  ClientDraw d{uniform_weights(k), synth.samples_per_client};
  switch (spec.mode) {
    case PartitionMode::iid:
      break;
    case PartitionMode::dirichlet_label_skew: {
      if (!(spec.alpha > 0.0)) throw ValidationError("partition: alpha must be positive");
      Rng rng(mix_seed(spec.seed, 0x64697269ULL, to_u32(client)));
      d.class_weights = dirichlet(rng, k, spec.alpha);
      break;
    }
    case PartitionMode::quantity_skew: {
      if (!(spec.sigma > 0.0)) throw ValidationError("partition: sigma must be positive");
      Rng rng(mix_seed(spec.seed, 0x7174795fULL, to_u32(client)));
      const double factor = rng.lognormal(0.0, spec.sigma);
      d.n_samples = std::max(10, static_cast<int>(std::lround(synth.samples_per_client * factor)));
      break;
    }
    case PartitionMode::clustered_label_skew: {
      if (spec.n_groups < 1 || spec.n_groups > k) throw ValidationError("partition: n_groups must be in [1, num_classes]");
      if (!(spec.leak >= 0.0 && spec.leak < 1.0)) throw ValidationError("partition: leak must be in [0, 1)");
      const int group = static_cast<int>(to_u32(client) % static_cast<std::uint32_t>(spec.n_groups));
      int own = 0;
      for (int c = 0; c < k; ++c) own += (c % spec.n_groups == group);
      const int other = k - own;
      const double leak = other == 0 ? 0.0 : spec.leak;
      for (int c = 0; c < k; ++c) {
        d.class_weights[static_cast<std::size_t>(c)] =
            (c % spec.n_groups == group) ? (1.0 - leak) / own : leak / other;
      }
      break;
    }
  }
  return d;
}

/// One shard per client, ids 0..n_clients-1.
inline std::vector<ClientShard> partition(const PartitionSpec& spec, const SyntheticSpec& synth, int n_clients) {
  if (n_clients < 1) throw ValidationError("partition: n_clients must be >= 1");
  synth.validate();
  std::vector<ClientShard> shards;
  shards.reserve(static_cast<std::size_t>(n_clients));
  for (int c = 0; c < n_clients; ++c) {
    const ClientId id{static_cast<std::uint32_t>(c)};
    auto draw = client_draw(spec, synth, id);
    const Dataset raw = collect(synth, id, draw.class_weights, draw.n_samples);
    shards.push_back(build_shard(id, raw, std::move(draw.class_weights), mix_seed(spec.seed, synth.seed)));
  }
  return shards;
}

/// Disjoint seeded global sample with uniform class weights, normalized with
/// its own statistics. Simulation-only evaluation oracle.
inline Dataset make_holdout(const SyntheticSpec& synth, int n_samples) {
  constexpr ClientId kHoldoutStream{0xFFFFFFF0u};
  const auto w = uniform_weights(synth.num_classes);
  return preprocess(collect(synth, kHoldoutStream, w, n_samples)).data;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

inline std::vector<double> normalized(std::span<const int> counts) {
  double n = 0.0;
  for (const int c : counts) n += c;
  std::vector<double> p(counts.size(), 0.0);
  if (n > 0.0) {
    for (std::size_t i = 0; i < counts.size(); ++i) p[i] = counts[i] / n;
  }
  return p;
}

inline std::vector<double> label_distribution(const ClientShard& shard) {
  if (shard.train.empty()) throw EmptyInputError("label distribution: empty shard");
  return normalized(shard.label_histogram);
}

inline constexpr double kAugmentTolerance = 0.05;
inline constexpr int kAugmentCap = 10;

/// Oversamples under-represented classes by duplicating random original
/// members with Gaussian jitter until the label distribution is within total
/// variation 0.05 of `target`, or every deficient class hits 10x its
/// original count. Original rows are kept; the test split is untouched.
inline ClientShard augment_balance(const ClientShard& shard, std::span<const double> target, double jitter_sigma,
                                   std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(shard.train.num_classes());
  detail::check_probability_vector(target, k, "heterogeneous data handler");
  const std::vector<int> orig = shard.train.label_histogram();

  std::string missing;
  for (std::size_t c = 0; c < k; ++c) {
    if (target[c] > 0.0 && orig[c] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!missing.empty())
    throw ValidationError("heterogeneous data handler: unresolvable classes with no local samples: " + missing);

  std::vector<int> counts = orig;
  auto current_tv = [&] { return total_variation(normalized(counts), target); };
  if (current_tv() <= kAugmentTolerance) return shard;

  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < shard.train.size(); ++i) members[static_cast<std::size_t>(shard.train.label(i))].push_back(i);

  ClientShard out = shard;
  Rng rng(mix_seed(seed, 0x61756731ULL, to_u32(shard.client_id)));
  std::vector<double> x(static_cast<std::size_t>(shard.train.dim()));
  while (current_tv() > kAugmentTolerance) {
    double total = 0.0;
    for (const int c : counts) total += c;
    std::size_t best = k;
    double best_deficit = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] >= kAugmentCap * orig[c]) continue;
      const double deficit = target[c] - counts[c] / total;
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = c;
      }
    }
    if (best == k) break;
    const auto& pool = members[best];
    const auto src = shard.train.row(pool[static_cast<std::size_t>(rng.below(pool.size()))]);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = src[j] + jitter_sigma * rng.normal();
    out.train.add(x, static_cast<int>(best));
    ++counts[best];
  }
  out.label_histogram = out.train.label_histogram();
  return out;
}

}  // namespace flsim
