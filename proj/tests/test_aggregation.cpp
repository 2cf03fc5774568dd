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

#include <cmath>

#include "test_support.hpp"

namespace flsim {
namespace {

using testing::max_abs_diff;
using testing::random_vector;

std::vector<WeightedUpdate> random_updates(std::uint64_t seed, std::size_t count, std::size_t d) {
  Rng rng(seed);
  std::vector<WeightedUpdate> out;
  for (std::size_t i = 0; i < count; ++i) {
    // Descending ids so that ascending order differs from input order.
    const auto id = static_cast<std::uint32_t>((count - 1 - i) * 3 + 1);
    out.push_back({ClientId{id}, ParameterVector(random_vector(rng, d, -2.0, 2.0)), 1 + rng.below(200)});
  }
  return out;
}

// Two-pass oracle: total first, then per-coordinate sums in ascending id order.
std::vector<double> naive_fedavg(std::vector<WeightedUpdate> ups) {
  std::sort(ups.begin(), ups.end(), [](const auto& a, const auto& b) { return to_u32(a.client) < to_u32(b.client); });
  double total = 0;
  for (const auto& u : ups) total += static_cast<double>(u.n);
  std::vector<double> out(ups.front().params.size(), 0.0);
  for (std::size_t j = 0; j < out.size(); ++j)
    for (const auto& u : ups) out[j] += static_cast<double>(u.n) / total * u.params[j];
  return out;
}

TEST(FedAvg, SingleUpdateUnchanged) {
  Rng rng(1);
  const std::vector<WeightedUpdate> ups{{ClientId{4}, ParameterVector(random_vector(rng, 30)), 17}};
  EXPECT_EQ(fedavg(ups), ups[0].params);
}

TEST(FedAvg, WeightedMeanArithmetic) {
  const std::vector<WeightedUpdate> ups{{ClientId{0}, ParameterVector({1.0, 3.0}), 1},
                                        {ClientId{1}, ParameterVector({3.0, 5.0}), 3}};
  EXPECT_EQ(fedavg(ups), ParameterVector({2.5, 4.5}));
}

TEST(FedAvg, BitEqualToNaiveOracle) {
  const auto ups = random_updates(21, 50, 64);
  EXPECT_EQ(fedavg(ups).vec(), naive_fedavg(ups));
  auto reversed = ups;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(fedavg(reversed), fedavg(ups));
}

TEST(FedAvg, Errors) {
  std::vector<WeightedUpdate> none;
  EXPECT_THROW(fedavg(none), ValidationError);
  const std::vector<WeightedUpdate> mismatch{{ClientId{0}, ParameterVector({1.0}), 1},
                                             {ClientId{1}, ParameterVector({1.0, 2.0}), 1}};
  EXPECT_THROW(fedavg(mismatch), ShapeError);
  const std::vector<WeightedUpdate> dup{{ClientId{0}, ParameterVector({1.0}), 1},
                                        {ClientId{0}, ParameterVector({2.0}), 1}};
  EXPECT_THROW(fedavg(dup), ValidationError);
}

TEST(FedAvg, ConvexCombinationBounds) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto ups = random_updates(s, 8, 10);
    const auto g = fedavg(ups);
    for (std::size_t j = 0; j < g.size(); ++j) {
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& u : ups) {
        lo = std::min(lo, u.params[j]);
        hi = std::max(hi, u.params[j]);
      }
      EXPECT_GE(g[j], lo - 1e-12);
      EXPECT_LE(g[j], hi + 1e-12);
    }
  }
}

TEST(Secure, TwoClientPadsCancel) {
  const std::vector<WeightedUpdate> ups{{ClientId{2}, ParameterVector({0.25, -1.5}), 1},
                                        {ClientId{9}, ParameterVector({0.75, 2.5}), 1}};
  const std::vector<ClientId> cohort{ClientId{2}, ClientId{9}};
  const auto a = mask_update(ups[0], cohort, 5);
  const auto b = mask_update(ups[1], cohort, 5);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(a.words[j] + b.words[j], encode_fixed(ups[0].params[j]) + encode_fixed(ups[1].params[j]));
    EXPECT_NE(a.words[j], encode_fixed(ups[0].params[j]));
  }
}

TEST(Secure, PadIsSharedAndOrdered) {
  const MaskPad p = make_pad(ClientId{7}, ClientId{3}, 11, 16);
  const MaskPad q = make_pad(ClientId{3}, ClientId{7}, 11, 16);
  EXPECT_EQ(to_u32(p.lo), 3u);
  EXPECT_EQ(to_u32(p.hi), 7u);
  EXPECT_EQ(p.pad, q.pad);
  EXPECT_NE(p.pad, make_pad(ClientId{3}, ClientId{7}, 12, 16).pad);
  EXPECT_THROW(make_pad(ClientId{1}, ClientId{1}, 0, 4), ValidationError);
}

TEST(Secure, MatchesFedAvgWithinTolerance) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto ups = random_updates(100 + s, 2 + s % 9, 40);
    EXPECT_LE(max_abs_diff(secure_round(ups, s), fedavg(ups)), 1e-9);
  }
}

TEST(Secure, FiveClientsRandomPads) {
  const auto ups = random_updates(5, 5, 200);
  EXPECT_LE(max_abs_diff(secure_round(ups, 0xabcdef), fedavg(ups)), 1e-9);
}

TEST(Secure, SingleContributorRejected) {
  const auto ups = random_updates(5, 1, 4);
  EXPECT_THROW(secure_round(ups, 0), ValidationError);
}

TEST(Secure, DropoutAfterMaskingAborts) {
  const auto ups = random_updates(6, 4, 8);
  std::vector<ClientId> cohort;
  for (const auto& u : ups) cohort.push_back(u.client);
  std::vector<MaskedUpdate> masked;
  for (std::size_t i = 0; i + 1 < ups.size(); ++i) masked.push_back(mask_update(ups[i], cohort, 3));
  EXPECT_THROW(unmask_sum(masked, cohort), SecureAbortError);
  masked.push_back(mask_update(ups.back(), cohort, 3));
  masked.push_back(masked.front());
  EXPECT_THROW(unmask_sum(masked, cohort), ValidationError);
}

TEST(Secure, MaskedWordsLookUniform) {
  // Each masked word is a sum of uniform pads; its top bit is a fair coin.
  const auto ups = random_updates(7, 6, 2000);
  std::vector<ClientId> cohort;
  for (const auto& u : ups) cohort.push_back(u.client);
  const auto m = mask_update(ups[0], cohort, 99);
  int high = 0;
  for (const auto w : m.words) high += static_cast<int>(w >> 63);
  EXPECT_NEAR(high / 2000.0, 0.5, 0.05);
}

TEST(Async, FreshFullWeightReturnsUpdate) {
  const ParameterVector g({1.0, 2.0}), u({5.0, -3.0});
  EXPECT_EQ(async_merge(g, u, 10, 4, 4, 1.0, 0.5), u);
}

TEST(Async, HalfWeightArithmetic) {
  EXPECT_EQ(async_merge(ParameterVector({0.0, 0.0}), ParameterVector({2.0, 2.0}), 1, 0, 0, 0.5, 0.5),
            ParameterVector({1.0, 1.0}));
}

TEST(Async, StalenessWeightTable) {
  double prev = INFINITY;
  for (std::uint64_t s = 0; s <= 10; ++s) {
    const double alpha = staleness_weight(0.6, 0.5, s);
    EXPECT_NEAR(alpha, 0.6 / std::sqrt(1.0 + static_cast<double>(s)), 1e-15);
    EXPECT_LE(alpha, prev);
    prev = alpha;
  }
  EXPECT_EQ(staleness_weight(0.6, 0.0, 9), 0.6);
}

TEST(Async, FixedPoint) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const ParameterVector g(random_vector(rng, 20, -10, 10));
    EXPECT_EQ(async_merge(g, g, 1, 7, static_cast<std::uint64_t>(t % 8), 0.6, 0.5), g);
  }
}

TEST(Async, MatchesConvexFormula) {
  Rng rng(2);
  const ParameterVector g(random_vector(rng, 10)), u(random_vector(rng, 10));
  const auto out = async_merge(g, u, 1, 5, 2, 0.6, 0.5);
  const double alpha = 0.6 * std::pow(4.0, -0.5);
  for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(out[j], (1 - alpha) * g[j] + alpha * u[j], 1e-15);
}

TEST(Async, Errors) {
  const ParameterVector g({0.0});
  EXPECT_THROW(async_merge(g, g, 1, 1, 1, 0.0, 0.5), ConfigError);
  EXPECT_THROW(async_merge(g, g, 1, 1, 1, 1.5, 0.5), ConfigError);
  EXPECT_THROW(async_merge(g, g, 1, 1, 2, 0.5, 0.5), ValidationError);
  EXPECT_THROW(async_merge(g, ParameterVector({0.0, 1.0}), 1, 1, 1, 0.5, 0.5), ShapeError);
}

std::vector<EdgeGroup> split(const std::vector<WeightedUpdate>& ups, std::size_t groups, std::uint64_t seed) {
  std::vector<EdgeGroup> g(groups);
  for (std::size_t i = 0; i < groups; ++i) g[i].edge_id = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  for (const auto& u : ups) g[rng.below(groups)].members.push_back(u.client);
  return g;
}

TEST(Hierarchical, OneGroupIsBitwiseFlat) {
  const auto ups = random_updates(8, 12, 30);
  EXPECT_EQ(hierarchical_aggregate(split(ups, 1, 0), ups), fedavg(ups));
}

TEST(Hierarchical, SingletonGroups) {
  const auto ups = random_updates(9, 12, 30);
  std::vector<EdgeGroup> g;
  for (std::size_t i = 0; i < ups.size(); ++i) g.push_back({static_cast<std::uint32_t>(i), {ups[i].client}});
  EXPECT_LE(max_abs_diff(hierarchical_aggregate(g, ups), fedavg(ups)), 1e-12);
}

TEST(Hierarchical, RandomSplitsMatchFlat) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto ups = random_updates(200 + s, 12, 25);
    EXPECT_LE(max_abs_diff(hierarchical_aggregate(split(ups, 3, s), ups), fedavg(ups)), 1e-12);
  }
}

TEST(Hierarchical, EdgeWeightIsMemberSampleSum) {
  const auto ups = random_updates(3, 4, 5);
  const EdgeModel e = edge_aggregate(2, ups);
  std::uint64_t total = 0;
  for (const auto& u : ups) total += u.n;
  EXPECT_EQ(e.weight, total);
  EXPECT_EQ(e.edge_id, 2u);
}

TEST(Hierarchical, PartitionErrors) {
  const auto ups = random_updates(10, 4, 3);
  std::vector<EdgeGroup> overlap{{0, {ups[0].client, ups[1].client}}, {1, {ups[1].client, ups[2].client, ups[3].client}}};
  EXPECT_THROW(hierarchical_aggregate(overlap, ups), PartitionError);
  std::vector<EdgeGroup> incomplete{{0, {ups[0].client, ups[1].client}}};
  EXPECT_THROW(hierarchical_aggregate(incomplete, ups), PartitionError);
  std::vector<EdgeGroup> phantom{{0, {ups[0].client, ups[1].client, ups[2].client, ups[3].client, ClientId{999}}}};
  EXPECT_THROW(hierarchical_aggregate(phantom, ups), PartitionError);
}

std::vector<ClientId> ids(std::size_t n) {
  std::vector<ClientId> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(ClientId{static_cast<std::uint32_t>(i)});
  return v;
}

NodeStates random_states(const std::vector<ClientId>& nodes, std::uint64_t seed, std::size_t d) {
  Rng rng(seed);
  NodeStates s;
  for (const auto id : nodes) s.emplace(id, ParameterVector(random_vector(rng, d, -5, 5)));
  return s;
}

TEST(Gossip, MetropolisWeightsAreDoublyStochastic) {
  for (const auto& g : {GossipGraph::ring(ids(8)), GossipGraph::complete(ids(5)),
                        GossipGraph(ids(4), {{ClientId{0}, ClientId{1}}, {ClientId{1}, ClientId{2}}, {ClientId{1}, ClientId{3}}})}) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      double row = 0;
      for (std::size_t j = 0; j < g.size(); ++j) {
        EXPECT_GE(g.weight(i, j), 0.0);
        EXPECT_EQ(g.weight(i, j), g.weight(j, i));
        row += g.weight(i, j);
        if (i != j && g.weight(i, j) != 0.0) {
          const double expect = 1.0 / (1.0 + static_cast<double>(std::max(g.neighbors(i).size(), g.neighbors(j).size())));
          EXPECT_EQ(g.weight(i, j), expect);
        }
      }
      EXPECT_NEAR(row, 1.0, 1e-15);
    }
  }
}

TEST(Gossip, DisconnectedRejected) {
  EXPECT_THROW(GossipGraph(ids(4), {{ClientId{0}, ClientId{1}}, {ClientId{2}, ClientId{3}}}), ValidationError);
  EXPECT_THROW(GossipGraph(ids(2), {{ClientId{0}, ClientId{5}}}), ValidationError);
}

TEST(Gossip, EqualStatesAreFixedPoint) {
  const auto g = GossipGraph::ring(ids(6));
  NodeStates s;
  for (const auto id : g.nodes()) s.emplace(id, ParameterVector({1.5, -2.0}));
  const auto out = gossip_round(g, s);
  for (const auto& [id, p] : out) EXPECT_EQ(p, ParameterVector({1.5, -2.0}));
}

TEST(Gossip, TwoNodePathAverages) {
  const auto g = GossipGraph::ring(ids(2));
  EXPECT_EQ(g.weight(0, 1), 0.5);
  NodeStates s{{ClientId{0}, ParameterVector({0.0})}, {ClientId{1}, ParameterVector({2.0})}};
  const auto out = gossip_round(g, s);
  EXPECT_EQ(out.at(ClientId{0})[0], 1.0);
  EXPECT_EQ(out.at(ClientId{1})[0], 1.0);
}

TEST(Gossip, MeanPreservedAndSpreadNonIncreasing) {
  const auto g = GossipGraph::ring(ids(8));
  NodeStates s = random_states(g.nodes(), 31, 6);
  const auto mean0 = node_mean(s);
  double prev = spread(s);
  for (int r = 0; r < 200; ++r) {
    s = gossip_round(g, s);
    EXPECT_LE(max_abs_diff(node_mean(s), mean0), 1e-12);
    const double sp = spread(s);
    EXPECT_LE(sp, prev + 1e-15);
    prev = sp;
  }
  for (const auto& [id, p] : s) EXPECT_LE(max_abs_diff(p.values(), mean0), 1e-6);
}

TEST(Gossip, LostMessagesFallBackToOwnState) {
  const auto g = GossipGraph::complete(ids(3));
  NodeStates s{{ClientId{0}, ParameterVector({0.0})}, {ClientId{1}, ParameterVector({3.0})}, {ClientId{2}, ParameterVector({6.0})}};
  const auto none = gossip_round(g, s, [](std::size_t, std::size_t) { return false; });
  EXPECT_EQ(none, s);
  EXPECT_THROW(gossip_round(g, NodeStates{{ClientId{0}, ParameterVector({0.0})}}), ValidationError);
}

}  // namespace
}  // namespace flsim
