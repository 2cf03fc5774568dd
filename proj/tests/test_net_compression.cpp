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

#include <algorithm>
#include <cmath>
#include <tuple>

#include "test_support.hpp"

namespace flsim {
namespace {

using testing::random_vector;

NetConfig quiet_net() { return NetConfig{}; }

TEST(Send, IdealNetworkDeliversImmediately) {
  Envelope env;
  env.byte_size = 100;
  const Envelope out = send(env, quiet_net(), 2.5);
  ASSERT_FALSE(out.dropped());
  EXPECT_EQ(*out.delivered_at, 2.5);
  EXPECT_EQ(out.sent_at, 2.5);
}

TEST(Send, NearCertainDropout) {
  NetConfig cfg;
  cfg.dropout_prob = 1.0 - 1e-12;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Envelope env;
    env.seq = s;
    EXPECT_TRUE(send(env, cfg, 0.0).dropped());
  }
}

TEST(Send, BandwidthArithmetic) {
  NetConfig cfg;
  cfg.bandwidth_bytes_per_s = 1000.0;
  Envelope env;
  env.byte_size = 500;
  EXPECT_EQ(*send(env, cfg, 1.0).delivered_at, 1.5);
}

TEST(Send, LatencyWithinBoundsAndCausal) {
  NetConfig cfg;
  cfg.latency_ms_min = 10;
  cfg.latency_ms_max = 30;
  cfg.bandwidth_bytes_per_s = 1e4;
  cfg.dropout_prob = 0.3;
  cfg.seed = 5;
  int dropped = 0;
  const int n = 5000;
  for (int i = 0; i < n; ++i) {
    Envelope env;
    env.sender = static_cast<std::uint32_t>(i % 7);
    env.receiver = kServerNode;
    env.byte_size = 100 + static_cast<std::uint64_t>(i);
    env.seq = static_cast<std::uint64_t>(i);
    const Envelope out = send(env, cfg, 3.0);
    if (out.dropped()) {
      ++dropped;
      continue;
    }
    const double floor = 3.0 + static_cast<double>(env.byte_size) / 1e4;
    EXPECT_GE(*out.delivered_at, floor + 0.010 - 1e-12);
    EXPECT_LE(*out.delivered_at, floor + 0.030 + 1e-12);
  }
  EXPECT_NEAR(static_cast<double>(dropped) / n, 0.3, 4.0 * std::sqrt(0.21 / n));
}

TEST(Send, OutcomeIndependentOfResolutionOrder) {
  NetConfig cfg;
  cfg.latency_ms_max = 50;
  cfg.dropout_prob = 0.5;
  cfg.seed = 11;
  std::vector<Envelope> envs(50);
  for (std::size_t i = 0; i < envs.size(); ++i) {
    envs[i].sender = static_cast<std::uint32_t>(i);
    envs[i].seq = i;
  }
  std::vector<std::optional<double>> forward, backward(envs.size());
  for (const auto& e : envs) forward.push_back(send(e, cfg, 0.0).delivered_at);
  for (std::size_t i = envs.size(); i-- > 0;) backward[i] = send(envs[i], cfg, 0.0).delivered_at;
  EXPECT_EQ(forward, backward);
}

TEST(Send, RejectsEmptyMessageAndBadConfig) {
  Envelope env;
  env.byte_size = 0;
  EXPECT_THROW(send(env, quiet_net(), 0.0), ValidationError);
  NetConfig cfg;
  cfg.latency_ms_min = 5;
  cfg.latency_ms_max = 1;
  EXPECT_THROW(Network{cfg}, ConfigError);
  cfg = NetConfig{};
  cfg.dropout_prob = 1.0;
  EXPECT_THROW(Network{cfg}, ConfigError);
}

TEST(NetworkTest, NumbersMessagesAndCountsBytes) {
  Network net(quiet_net());
  const auto a = net.send(0, kServerNode, 10, 0.0);
  const auto b = net.send(1, kServerNode, 20, 0.0);
  EXPECT_EQ(a.seq, 0u);
  EXPECT_EQ(b.seq, 1u);
  EXPECT_EQ(net.messages_sent(), 2u);
  EXPECT_EQ(net.bytes_sent(), 30u);
  EXPECT_EQ(node_name(kServerNode), "server");
  EXPECT_EQ(node_name(edge_node(2)), "edge2");
  EXPECT_EQ(node_name(7), "client7");
}

TEST(Queue, TieBreaksOnSeq) {
  EventQueue<int> q;
  for (int i = 0; i < 8; ++i) q.schedule(i == 5 || i == 7 ? 1.0 : 2.0, EventKind::Timer, i);
  const auto first = q.next();
  const auto second = q.next();
  EXPECT_EQ(first->seq, 5u);
  EXPECT_EQ(second->seq, 7u);
}

TEST(Queue, EmptySignalIsNotAnError) {
  EventQueue<int> q;
  EXPECT_FALSE(q.next().has_value());
  EXPECT_TRUE(q.empty());
}

TEST(Queue, RejectsEventsInThePast) {
  EventQueue<int> q;
  q.schedule(5.0, EventKind::Deliver, 0);
  q.next();
  EXPECT_THROW(q.schedule(4.0, EventKind::Deliver, 1), ValidationError);
  EXPECT_NO_THROW(q.schedule(5.0, EventKind::Deliver, 1));
}

TEST(Queue, FuzzMatchesSortOracle) {
  Rng rng(2024);
  EventQueue<int> q;
  std::vector<std::tuple<double, std::uint64_t>> scheduled, popped;
  // Interleave schedules and pops; new events never precede the clock.
  for (int i = 0; i < 1000; ++i) {
    const double t = q.now() + std::floor(rng.uniform() * 20.0) * 0.25;
    scheduled.emplace_back(t, q.schedule(t, EventKind::Timer, i));
    if (rng.uniform() < 0.3) {
      const auto ev = q.next();
      popped.emplace_back(ev->time_s, ev->seq);
    }
  }
  while (auto ev = q.next()) popped.emplace_back(ev->time_s, ev->seq);
  ASSERT_EQ(popped.size(), 1000u);
  EXPECT_TRUE(std::is_sorted(popped.begin(), popped.end()));
  std::sort(scheduled.begin(), scheduled.end());
  EXPECT_EQ(popped, scheduled);
}

TEST(Queue, BatchFuzzEqualsSortedOrder) {
  Rng rng(77);
  EventQueue<int> q;
  std::vector<std::tuple<double, std::uint64_t>> expect, got;
  for (int i = 0; i < 1000; ++i) {
    const double t = std::floor(rng.uniform() * 50.0);
    expect.emplace_back(t, q.schedule(t, EventKind::Deliver, i));
  }
  std::sort(expect.begin(), expect.end());
  while (auto ev = q.next()) got.emplace_back(ev->time_s, ev->seq);
  EXPECT_EQ(got, expect);
}

TEST(WireSize, DenseAndCompressedFormulas) {
  const ParameterVector p(std::vector<double>(27, 0.5));
  EXPECT_EQ(byte_size_of(p), 16u + 8u * 27u);
  EXPECT_EQ(encode_dense(MessageKind::dense_update, 1, 2, p.values()).size(), byte_size_of(p));
  Rng rng(1);
  const auto x = random_vector(rng, 1000);
  const CompressedUpdate cu = compress(x, CompressionSpec{0.1, 8});
  EXPECT_EQ(cu.indices.size(), 100u);
  EXPECT_EQ(byte_size_of(cu), 524u);
  EXPECT_EQ(encode_compressed(0, 0, cu).size(), 524u);
}

TEST(WireSize, RecompressionPreservesSize) {
  Rng rng(3);
  for (const int bits : {4, 8, 16}) {
    const auto x = random_vector(rng, 300);
    const CompressedUpdate cu = compress(x, CompressionSpec{0.2, bits});
    const CompressedUpdate again = compress(decompress(cu).values(), CompressionSpec{0.2, bits});
    EXPECT_EQ(byte_size_of(again), byte_size_of(cu));
  }
}

TEST(WireSize, MonotoneInBitsAndTopK) {
  const std::size_t d = 200;
  const std::size_t dense = dense_message_bytes(d);
  std::size_t prev_k = 0;
  for (const double top_k : {0.05, 0.1, 0.25, 0.5, 1.0}) {
    std::size_t prev_b = 0;
    for (const int bits : {4, 8, 16}) {
      const std::size_t b = compressed_message_bytes(kept_count(top_k, d), bits);
      EXPECT_GE(b, prev_b);
      EXPECT_LT(b, dense);
      prev_b = b;
    }
    const std::size_t b16 = compressed_message_bytes(kept_count(top_k, d), 16);
    EXPECT_GE(b16, prev_k);
    prev_k = b16;
  }
}

TEST(Wire, HeaderLayoutIsLittleEndian) {
  const std::vector<double> v{1.0};
  const Bytes b = encode_dense(MessageKind::broadcast, 0x01020304u, 7, v);
  ASSERT_EQ(b.size(), 24u);
  EXPECT_EQ(b[0], 1);  // kind
  EXPECT_EQ(b[4], 0x04);
  EXPECT_EQ(b[7], 0x01);
  EXPECT_EQ(b[8], 7);
  EXPECT_EQ(b[12], 1);  // count
  EXPECT_EQ(b[23], 0x3f);  // high byte of 1.0
}

TEST(Wire, DecodeRoundTrips) {
  Rng rng(8);
  const auto x = random_vector(rng, 40);
  const auto dense = decode_payload(encode_dense(MessageKind::gossip_state, 3, 9, x));
  EXPECT_EQ(dense.header.kind, MessageKind::gossip_state);
  EXPECT_EQ(dense.header.round, 3u);
  EXPECT_EQ(dense.header.sender, 9u);
  EXPECT_EQ(dense.dense, x);
  const auto edge = decode_payload(encode_edge(1, 2, x, 17.0));
  EXPECT_EQ(edge.dense, x);
  EXPECT_EQ(edge.edge_weight, 17.0);
  EXPECT_EQ(encode_edge(1, 2, x, 1.0).size(), edge_message_bytes(40));
  const CompressedUpdate cu = compress(x, CompressionSpec{0.3, 4});
  EXPECT_EQ(decode_payload(encode_compressed(1, 1, cu), 40, 4).compressed, cu);
  const std::vector<std::uint64_t> words{1, 2, 0xffffffffffffffffULL};
  EXPECT_EQ(decode_payload(encode_masked(0, 0, words)).masked, words);
  EXPECT_EQ(encode_masked(0, 0, words).size(), masked_message_bytes(3));
}

TEST(Wire, CorruptMessagesRejected) {
  const std::vector<double> v{1.0, 2.0};
  Bytes b = encode_dense(MessageKind::dense_update, 0, 0, v);
  Bytes truncated(b.begin(), b.end() - 1);
  EXPECT_THROW(decode_payload(truncated), CorruptionError);
  Bytes trailing = b;
  trailing.push_back(0);
  EXPECT_THROW(decode_payload(trailing), CorruptionError);
  Bytes bad_kind = b;
  bad_kind[0] = 99;
  EXPECT_THROW(decode_payload(bad_kind), CorruptionError);
}

TEST(Wire, EvalReportSize) {
  EvalReport r;
  r.per_class_counts = {1, 2, 3};
  ByteWriter w;
  write_eval_report(w, r);
  EXPECT_EQ(w.bytes().size(), eval_report_bytes(3));
  EXPECT_EQ(eval_report_bytes(3), 24u + 4u * 3u);
}

TEST(Compress, KeepsLargestMagnitudes) {
  const std::vector<double> x{0.9, -0.1, 0.5, 0.05};
  const CompressedUpdate cu = compress(x, CompressionSpec{0.5, 8});
  EXPECT_EQ(cu.indices, (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(cu.scale, 0.9);
}

TEST(Compress, MagnitudeTiesGoToLowerIndex) {
  const std::vector<double> x{0.5, -0.5, 0.5, 0.1};
  EXPECT_EQ(compress(x, CompressionSpec{0.5, 8}).indices, (std::vector<std::uint32_t>{0, 1}));
}

TEST(Compress, SixteenBitBound) {
  Rng rng(4);
  const auto x = random_vector(rng, 500);
  const auto y = decompress(compress(x, CompressionSpec{1.0, 16}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i] - x[i]), 2.0 / 65535.0);
}

TEST(Compress, ExactBoundAgainstTopKOracle) {
  Rng rng(99);
  for (int trial = 0; trial < 60; ++trial) {
    const int bits = std::array{4, 8, 16}[static_cast<std::size_t>(trial % 3)];
    const double top_k = std::array{0.01, 0.1, 0.37, 1.0}[static_cast<std::size_t>(trial % 4)];
    const auto x = random_vector(rng, 1000, -5.0, 5.0);
    const CompressedUpdate cu = compress(x, CompressionSpec{top_k, bits});
    // Oracle top-k: rank by (-|x|, index).
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(x[a]) != std::abs(x[b]) ? std::abs(x[a]) > std::abs(x[b]) : a < b;
    });
    const auto k = static_cast<std::size_t>(std::ceil(top_k * 1000 - 1e-9));
    std::vector<double> x_topk(x.size(), 0.0);
    for (std::size_t i = 0; i < k; ++i) x_topk[order[i]] = x[order[i]];
    const auto y = decompress(cu);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(y[i] - x_topk[i]));
    EXPECT_LE(err, cu.scale / ((1 << bits) - 1) * (1 + 1e-12));
    EXPECT_EQ(cu.indices.size(), k);
  }
}

TEST(Compress, AllZeroUpdate) {
  const std::vector<double> x(10, 0.0);
  const CompressedUpdate cu = compress(x, CompressionSpec{0.3, 8});
  EXPECT_EQ(cu.scale, 0.0);
  const ParameterVector y = decompress(cu);
  for (const double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Compress, RightInverseOnCodeDomain) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const int bits = std::array{4, 8, 16}[static_cast<std::size_t>(trial % 3)];
    const auto x = random_vector(rng, 120);
    const CompressedUpdate cu = compress(x, CompressionSpec{0.25, bits});
    const CompressedUpdate again = compress(decompress(cu).values(), CompressionSpec{0.25, bits});
    EXPECT_EQ(again.indices, cu.indices);
    EXPECT_EQ(again.codes, cu.codes);
  }
}

TEST(Compress, RejectsBadInput) {
  const std::vector<double> x{1.0, NAN};
  EXPECT_THROW(compress(x, CompressionSpec{1.0, 8}), ValidationError);
  const std::vector<double> ok{1.0};
  EXPECT_THROW(compress(ok, CompressionSpec{0.0, 8}), ConfigError);
  EXPECT_THROW(compress(ok, CompressionSpec{1.0, 7}), ConfigError);
  EXPECT_THROW(compress(ok, CompressionSpec{1.0, 64}), ConfigError);
}

TEST(Decompress, EmptyIndicesAndCorruption) {
  CompressedUpdate cu;
  cu.d = 5;
  cu.scale = 1.0;
  EXPECT_EQ(decompress(cu), ParameterVector::zeros(5));
  cu.indices = {5};
  cu.codes = {0};
  EXPECT_THROW(decompress(cu), CorruptionError);
  cu.indices = {3, 1};
  cu.codes = {0, 0};
  EXPECT_THROW(decompress(cu), CorruptionError);
}

}  // namespace
}  // namespace flsim
