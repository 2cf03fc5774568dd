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
#include <numeric>

#include "test_support.hpp"

namespace flsim {
namespace {

using testing::blob_dataset;
using testing::max_abs_diff;
using testing::max_relative_error;
using testing::random_vector;

// Independent reference forward pass: long double accumulation, unshifted
// exponentials, parameters addressed through explicit layer offsets.
std::vector<long double> reference_probs(const std::vector<double>& w, const ArchDescriptor& a, std::span<const double> x) {
  const int f = a.input_dim, k = a.num_classes, h = a.hidden_dim;
  std::vector<long double> z(static_cast<std::size_t>(k));
  if (a.kind == ModelKind::logistic) {
    for (int c = 0; c < k; ++c) {
      long double s = w[static_cast<std::size_t>(k * f + c)];
      for (int j = 0; j < f; ++j) s += static_cast<long double>(w[static_cast<std::size_t>(c * f + j)]) * x[static_cast<std::size_t>(j)];
      z[static_cast<std::size_t>(c)] = s;
    }
  } else {
    const int off_b1 = h * f, off_w2 = off_b1 + h, off_b2 = off_w2 + k * h;
    std::vector<long double> hid(static_cast<std::size_t>(h));
    for (int u = 0; u < h; ++u) {
      long double s = w[static_cast<std::size_t>(off_b1 + u)];
      for (int j = 0; j < f; ++j) s += static_cast<long double>(w[static_cast<std::size_t>(u * f + j)]) * x[static_cast<std::size_t>(j)];
      hid[static_cast<std::size_t>(u)] = std::tanh(s);
    }
    for (int c = 0; c < k; ++c) {
      long double s = w[static_cast<std::size_t>(off_b2 + c)];
      for (int u = 0; u < h; ++u) s += static_cast<long double>(w[static_cast<std::size_t>(off_w2 + c * h + u)]) * hid[static_cast<std::size_t>(u)];
      z[static_cast<std::size_t>(c)] = s;
    }
  }
  long double total = 0;
  for (auto& v : z) total += (v = std::exp(v));
  for (auto& v : z) v /= total;
  return z;
}

Matrix fixed_input() {
  Matrix m(3, 4);
  const double rows[3][4] = {{0.5, -1.0, 2.0, 0.0}, {1.5, 0.25, -0.75, 3.0}, {-2.0, -0.5, 0.1, 1.0}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) m.at(i, j) = rows[i][j];
  return m;
}

TEST(Arch, ParameterCounts) {
  EXPECT_EQ(ArchDescriptor::logistic(8, 3).parameter_count(), 27u);
  EXPECT_EQ(ArchDescriptor::mlp(8, 16, 3).parameter_count(), 8u * 16 + 16 + 3 * 16 + 3);
  EXPECT_EQ(ArchDescriptor::mlp(8, 16, 3).body_count(), 8u * 16 + 16);
  ArchDescriptor bad = ArchDescriptor::logistic(4, 2);
  bad.hidden_dim = 3;
  EXPECT_THROW(bad.validate(), ShapeError);
  EXPECT_THROW(ArchDescriptor::logistic(4, 1).validate(), ShapeError);
}

TEST(ParameterVectorTest, RejectsNonFinite) {
  EXPECT_THROW(ParameterVector({1.0, std::nan("")}), ValidationError);
  EXPECT_THROW(ParameterVector({INFINITY}), ValidationError);
  EXPECT_EQ(ParameterVector::zeros(5).size(), 5u);
}

TEST(HyperparametersTest, EpochsZeroRejected) {
  EXPECT_THROW(Hyperparameters(0.1, 0, 8, 0.0, 1), ValidationError);
  EXPECT_THROW(Hyperparameters(-0.1, 1, 8, 0.0, 1), ValidationError);
  EXPECT_THROW(Hyperparameters(0.1, 1, 0, 0.0, 1), ValidationError);
  EXPECT_THROW(Hyperparameters(0.1, 1, 8, -1.0, 1), ValidationError);
  EXPECT_NO_THROW(Hyperparameters(0.0, 1, 8, 0.0, 1));
}

TEST(Predict, ZeroParamsTwoClassesIsHalf) {
  const auto arch = ArchDescriptor::logistic(4, 2);
  const Matrix p = predict(ParameterVector::zeros(arch.parameter_count()), arch, fixed_input());
  for (std::size_t i = 0; i < p.rows; ++i) {
    EXPECT_EQ(p.at(i, 0), 0.5);
    EXPECT_EQ(p.at(i, 1), 0.5);
  }
}

TEST(Predict, SaturatedLogit) {
  const auto arch = ArchDescriptor::logistic(4, 2);
  std::vector<double> w(arch.parameter_count(), 0.0);
  w[arch.parameter_count() - 1] = 50.0;  // class-1 bias
  const Matrix p = predict(ParameterVector(w), arch, fixed_input());
  for (std::size_t i = 0; i < p.rows; ++i) EXPECT_GE(p.at(i, 1), 1.0 - 1e-20);
}

TEST(Predict, MatchesReferenceForward) {
  for (const auto& arch : {ArchDescriptor::logistic(4, 3), ArchDescriptor::mlp(4, 5, 3)}) {
    Rng rng(42);
    const auto w = random_vector(rng, arch.parameter_count());
    const Matrix x = fixed_input();
    const Matrix p = predict(ParameterVector(w), arch, x);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto ref = reference_probs(w, arch, x.row(i));
      for (std::size_t c = 0; c < ref.size(); ++c) EXPECT_NEAR(p.at(i, c), static_cast<double>(ref[c]), 1e-14);
    }
  }
}

TEST(Predict, RowsAreProbabilityVectors) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto arch = trial % 2 ? ArchDescriptor::mlp(6, 4, 5) : ArchDescriptor::logistic(6, 5);
    const ParameterVector w(random_vector(rng, arch.parameter_count(), -3.0, 3.0));
    Matrix x(10, 6);
    for (double& v : x.data) v = rng.uniform(-5.0, 5.0);
    const Matrix p = predict(w, arch, x);
    for (std::size_t i = 0; i < p.rows; ++i) {
      double s = 0.0;
      for (const double v : p.row(i)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Predict, ShapeErrors) {
  const auto arch = ArchDescriptor::logistic(4, 2);
  EXPECT_THROW(predict(ParameterVector::zeros(3), arch, fixed_input()), ShapeError);
  EXPECT_THROW(predict(ParameterVector::zeros(arch.parameter_count()), arch, Matrix(2, 5)), ShapeError);
}

TEST(Loss, ZeroParamsBalancedBinaryIsLn2) {
  const auto arch = ArchDescriptor::logistic(3, 2);
  Dataset d(3, 2);
  d.add(std::vector<double>{1, 2, 3}, 0);
  d.add(std::vector<double>{-1, 0, 4}, 1);
  const auto lg = loss_and_gradient(ParameterVector::zeros(arch.parameter_count()), arch, d, 0.0);
  EXPECT_NEAR(lg.loss, std::log(2.0), 1e-15);
  EXPECT_EQ(lg.grad.size(), arch.parameter_count());
}

TEST(Loss, UniformPredictorIsLnK) {
  for (const auto& arch : {ArchDescriptor::logistic(5, 4), ArchDescriptor::mlp(5, 3, 4)}) {
    const Dataset d = blob_dataset(9, 40, 5, 4);
    const auto lg = loss_and_gradient(ParameterVector::zeros(arch.parameter_count()), arch, d, 0.0);
    EXPECT_NEAR(lg.loss, std::log(4.0), 1e-12);
    EXPECT_NEAR(evaluate(ParameterVector::zeros(arch.parameter_count()), arch, d).loss, std::log(4.0), 1e-12);
  }
}

TEST(Loss, EmptyBatchThrows) {
  const auto arch = ArchDescriptor::logistic(3, 2);
  EXPECT_THROW(loss_and_gradient(ParameterVector::zeros(arch.parameter_count()), arch, Dataset(3, 2), 0.0),
               EmptyInputError);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  for (const auto& arch : {ArchDescriptor::logistic(4, 3), ArchDescriptor::mlp(4, 6, 3)}) {
    Rng rng(7);
    const ParameterVector w(random_vector(rng, arch.parameter_count()));
    const Dataset batch = blob_dataset(7, 12, 4, 3);
    for (const double l2 : {0.0, 0.3}) {
      const auto lg = loss_and_gradient(w, arch, batch, l2);
      const auto fd = finite_difference_gradient(w, arch, batch, 1e-5, l2);
      EXPECT_LE(max_relative_error(lg.grad.values(), fd.values()), 1e-5);
    }
  }
}

TEST(Loss, L2AddsWeightDecayOnWeightsOnly) {
  for (const auto& arch : {ArchDescriptor::logistic(4, 3), ArchDescriptor::mlp(4, 2, 3)}) {
    Rng rng(11);
    const ParameterVector w(random_vector(rng, arch.parameter_count()));
    const Dataset batch = blob_dataset(11, 9, 4, 3);
    const double l2 = 0.25;
    const auto plain = loss_and_gradient(w, arch, batch, 0.0);
    const auto reg = loss_and_gradient(w, arch, batch, l2);
    const std::size_t f = 4, k = 3, h = 2;
    std::vector<bool> is_weight(arch.parameter_count(), false);
    double sq = 0.0;
    auto mark = [&](std::size_t begin, std::size_t count) {
      for (std::size_t i = begin; i < begin + count; ++i) {
        is_weight[i] = true;
        sq += w[i] * w[i];
      }
    };
    if (arch.kind == ModelKind::logistic) {
      mark(0, k * f);
    } else {
      mark(0, h * f);
      mark(h * f + h, k * h);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double expect = is_weight[i] ? l2 * w[i] : 0.0;
      EXPECT_NEAR(reg.grad[i] - plain.grad[i], expect, 1e-14) << i;
    }
    EXPECT_NEAR(reg.loss - plain.loss, 0.5 * l2 * sq, 1e-14);
  }
}

TEST(FiniteDifference, QuadraticSurrogate) {
  const std::vector<double> x{3.0};
  const auto g = finite_difference_gradient([](std::span<const double> v) { return v[0] * v[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
  EXPECT_THROW(finite_difference_gradient([](std::span<const double> v) { return v[0]; }, x, 0.0), ValidationError);
  const auto arch = ArchDescriptor::logistic(2, 2);
  Dataset d(2, 2);
  d.add(std::vector<double>{1, 1}, 0);
  EXPECT_THROW(finite_difference_gradient(ParameterVector::zeros(6), arch, d, 0.0), ValidationError);
}

TEST(LocalTrain, ZeroLearningRateIsIdentity) {
  const auto arch = ArchDescriptor::mlp(4, 3, 3);
  Rng rng(1);
  const ParameterVector w(random_vector(rng, arch.parameter_count()));
  Hyperparameters hp(0.0, 1, 4, 0.0, 9);
  EXPECT_EQ(local_train(w, arch, blob_dataset(2, 20, 4, 3), hp), w);
}

TEST(LocalTrain, SingleSampleIsOneSgdStep) {
  const auto arch = ArchDescriptor::logistic(3, 2);
  Rng rng(3);
  const ParameterVector w(random_vector(rng, arch.parameter_count()));
  Dataset d(3, 2);
  d.add(std::vector<double>{0.3, -1.2, 2.0}, 1);
  const Hyperparameters hp(0.2, 1, 1, 0.0, 0);
  const auto g = loss_and_gradient(w, arch, d, 0.0).grad;
  const ParameterVector out = local_train(w, arch, d, hp);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(out[i], w[i] - 0.2 * g[i]);
}

TEST(LocalTrain, SeparableBlobReaches95) {
  const auto arch = ArchDescriptor::logistic(2, 2);
  Dataset d(2, 2);
  Rng rng(100);
  for (int i = 0; i < 200; ++i) {
    const int y = i % 2;
    const double c = y ? 2.0 : -2.0;
    d.add(std::vector<double>{c + 0.5 * rng.normal(), c + 0.5 * rng.normal()}, y);
  }
  const Hyperparameters hp(0.1, 5, 16, 0.0, 4);
  const auto w = local_train(ParameterVector::zeros(arch.parameter_count()), arch, d, hp);
  EXPECT_GE(evaluate(w, arch, d).accuracy, 0.95);
}

TEST(LocalTrain, Deterministic) {
  const auto arch = ArchDescriptor::mlp(5, 4, 3);
  const Dataset d = blob_dataset(6, 50, 5, 3);
  const ParameterVector w = init_params(arch, InitMode::seeded_uniform, 3);
  const Hyperparameters hp(0.05, 3, 7, 0.01, 77);
  const auto a = local_train(w, arch, d, hp);
  const auto b = local_train(w, arch, d, hp);
  EXPECT_EQ(a, b);
  Hyperparameters other = hp;
  other.seed = 78;
  EXPECT_NE(local_train(w, arch, d, other), a);
}

TEST(LocalTrain, BatchLargerThanShardIsFullBatch) {
  const auto arch = ArchDescriptor::logistic(4, 3);
  const Dataset d = blob_dataset(8, 10, 4, 3);
  const auto w0 = ParameterVector::zeros(arch.parameter_count());
  const auto g = loss_and_gradient(w0, arch, d, 0.0).grad;
  const auto out = local_train(w0, arch, d, Hyperparameters(0.5, 1, 64, 0.0, 1));
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_NEAR(out[i], -0.5 * g[i], 1e-15);
}

TEST(LocalTrain, DivergenceNamesEpochAndBatch) {
  const auto arch = ArchDescriptor::logistic(2, 2);
  Dataset d(2, 2);
  d.add(std::vector<double>{1e200, 1e200}, 0);
  d.add(std::vector<double>{-1e200, 1e200}, 1);
  try {
    local_train(ParameterVector::zeros(arch.parameter_count()), arch, d, Hyperparameters(1e200, 2, 1, 0.0, 0));
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 0);
    EXPECT_GE(e.batch(), 0);
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(LocalTrain, EmptyShardThrows) {
  const auto arch = ArchDescriptor::logistic(2, 2);
  EXPECT_THROW(local_train(ParameterVector::zeros(6), arch, Dataset(2, 2), Hyperparameters()), EmptyInputError);
}

TEST(Evaluate, EmptyIsDegenerate) {
  const auto arch = ArchDescriptor::logistic(2, 3);
  const auto r = evaluate(ParameterVector::zeros(arch.parameter_count()), arch, Dataset(2, 3));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.n_samples, 0);
  EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(Evaluate, ZeroParamsTieBreaksToClassZero) {
  const auto arch = ArchDescriptor::logistic(2, 2);
  Dataset d(2, 2);
  for (int i = 0; i < 10; ++i) d.add(std::vector<double>{double(i), 1.0}, i < 3 ? 0 : 1);
  const auto r = evaluate(ParameterVector::zeros(arch.parameter_count()), arch, d);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.3);
}

TEST(Evaluate, PerfectSeparator) {
  const auto arch = ArchDescriptor::logistic(1, 2);
  Dataset d(1, 2);
  for (int i = 1; i <= 5; ++i) {
    d.add(std::vector<double>{double(i)}, 1);
    d.add(std::vector<double>{-double(i)}, 0);
  }
  // logit_1 - logit_0 = 2x
  const ParameterVector w({-1.0, 1.0, 0.0, 0.0});
  EXPECT_EQ(evaluate(w, arch, d).accuracy, 1.0);
}

TEST(Evaluate, MatchesIndependentRecomputation) {
  for (const auto& arch : {ArchDescriptor::logistic(4, 3), ArchDescriptor::mlp(4, 5, 3)}) {
    Rng rng(13);
    const auto w = random_vector(rng, arch.parameter_count(), -2.0, 2.0);
    const Dataset d = blob_dataset(13, 60, 4, 3);
    long double loss = 0;
    int correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto p = reference_probs(w, arch, d.row(i));
      loss -= std::log(p[static_cast<std::size_t>(d.label(i))]);
      const auto best = std::max_element(p.begin(), p.end()) - p.begin();
      correct += best == d.label(i);
    }
    const auto r = evaluate(ParameterVector(w), arch, d);
    EXPECT_NEAR(r.loss, static_cast<double>(loss / d.size()), 1e-12);
    EXPECT_DOUBLE_EQ(r.accuracy, correct / 60.0);
    EXPECT_EQ(std::accumulate(r.per_class_counts.begin(), r.per_class_counts.end(), 0), r.n_samples);
    const double k = r.accuracy * r.n_samples;
    EXPECT_NEAR(k, std::round(k), 1e-9);
  }
}

TEST(Init, ZerosAndSeededUniform) {
  const auto arch = ArchDescriptor::mlp(5, 4, 3);
  const auto z = init_params(arch, InitMode::zeros, 1);
  for (const double v : z.values()) EXPECT_EQ(v, 0.0);
  const auto u = init_params(arch, InitMode::seeded_uniform, 1);
  for (const double v : u.values()) {
    EXPECT_GE(v, -0.05);
    EXPECT_LE(v, 0.05);
  }
  EXPECT_EQ(u, init_params(arch, InitMode::seeded_uniform, 1));
  EXPECT_NE(u, init_params(arch, InitMode::seeded_uniform, 2));
}

}  // namespace
}  // namespace flsim
